use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Frame;
use crate::error::{Error, Result};

/// Writes one JSON document per line.
pub fn write_frames<W: Write>(mut out: W, frames: &[Frame]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

/// Reads JSON Lines; blank lines are skipped. Errors name the 1-based line.
pub fn read_frames<R: Read>(input: R) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        frame.validate().map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn save_frames(path: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_frames(&mut w, frames)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_frames(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::fixtures::straight_frame;

    #[test]
    fn empty_dataset_round_trip() {
        let mut buf = Vec::new();
        write_frames(&mut buf, &[]).unwrap();
        assert!(buf.is_empty());
        assert!(read_frames(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_the_line() {
        let mut buf = Vec::new();
        write_frames(&mut buf, &[straight_frame(10.0, 2), straight_frame(12.0, 0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        let broken = lines.join("\n");
        match read_frames(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
