//! Stream framing: a decimal byte count, `\n`, then exactly that many bytes.

use std::io::{self, BufRead, Write};

/// Largest payload a single frame may carry (16 MiB).
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

// "16777216" is eight digits; anything longer is malformed before we even parse it.
const MAX_HEADER: usize = 9;

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    if bytes.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds 16 MiB"));
    }
    let mut buf = Vec::with_capacity(bytes.len() + MAX_HEADER + 1);
    buf.extend_from_slice(bytes.len().to_string().as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(bytes);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. Returns `Ok(None)` on clean end-of-stream between frames.
pub fn read_frame<R: BufRead>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = Vec::with_capacity(MAX_HEADER + 1);
    loop {
        let buf = r.fill_buf()?;
        if buf.is_empty() {
            return if header.is_empty() {
                Ok(None)
            } else {
                Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header"))
            };
        }
        let b = buf[0];
        r.consume(1);
        if b == b'\n' {
            break;
        }
        if !b.is_ascii_digit() || header.len() >= MAX_HEADER {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad frame header"));
        }
        header.push(b);
    }
    let len: usize = std::str::from_utf8(&header)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad frame length"))?;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds 16 MiB"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frames_round_trip_back_to_back() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        write_frame(&mut buf, b"").unwrap();
        write_frame(&mut buf, b"hello").unwrap();
        assert_eq!(&buf[..5], b"2\n{}0");
        let mut r = Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"{}");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn rejects_oversized_and_garbage_headers() {
        let mut r = Cursor::new(b"16777217\n".to_vec());
        assert!(read_frame(&mut r).is_err());
        let mut r = Cursor::new(b"12a\n".to_vec());
        assert!(read_frame(&mut r).is_err());
        let mut r = Cursor::new(b"5\nab".to_vec());
        assert!(read_frame(&mut r).is_err());
        assert!(write_frame(&mut Vec::new(), &vec![0u8; MAX_FRAME + 1]).is_err());
    }
}
