//! Agent tooling: tool and resource registration in a manager hierarchy,
//! schema-checked invocation with metering, task context and DAG workflows.

pub mod connector;
pub mod context;
pub mod manager;
pub mod service;
pub mod tool;
pub mod workflow;

pub use connector::{Connector, ConnectorFactory, FixtureConnector, FixtureFile, HttpApi, KvStore};
pub use context::{Context, ContextEntry, ContextWrite};
pub use manager::{Invocation, Located, ToolManager, ToolResolver, ToolTree, TreeCursor};
pub use service::{error_payload, read_tool_result, tool_manager_principal, ToolManagerService, ToolReply};
pub use tool::{check_descriptor, Action, ConnectorSpec, ResourceDescriptor, ResourceKind, ToolBinding, ToolDescriptor, ToolError};
pub use workflow::{
    execute_workflow, hash_value, validate_workflow, Binding, Meter, Outcome, RetryPolicy, RunStatus, StepStatus, TraceEntry, Usage,
    WorkflowDefinition, WorkflowRun, WorkflowStep,
};
