//! Streaming binary PLY (x, y, z float32; red, green, blue uint8).
//!
//! The vertex count is unknown while streaming, so the header reserves a
//! fixed-width count field that is patched when the writer is finished.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const COUNT_WIDTH: usize = 20;
const HEADER_HEAD: &str = "ply\nformat binary_little_endian 1.0\nelement vertex ";
const HEADER_TAIL: &str = "property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";

/// Header text for `count` vertices, count left-aligned in a fixed-width field.
pub fn header(count: u64) -> String {
    format!("{HEADER_HEAD}{count:<COUNT_WIDTH$}\n{HEADER_TAIL}")
}

pub struct PlyWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: u64,
}

impl PlyWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(header(0).as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(PlyWriter {
            path: path.to_path_buf(),
            out,
            count: 0,
        })
    }

    pub fn push(&mut self, p: [f32; 3], rgb: [u8; 3]) -> Result<()> {
        let mut rec = [0u8; 15];
        for (i, v) in p.iter().enumerate() {
            rec[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
        rec[12..].copy_from_slice(&rgb);
        self.out.write_all(&rec).map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Patches the vertex count and flushes; returns the count.
    pub fn finish(mut self) -> Result<u64> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        self.out.flush().map_err(io)?;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(HEADER_HEAD.len() as u64)).map_err(io)?;
        file.write_all(format!("{:<COUNT_WIDTH$}", self.count).as_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        Ok(self.count)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

/// Reads files in the layout [`PlyWriter`] produces (any vertex count
/// formatting, same property list).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut count = None;
    let mut properties = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format("ply", "missing end_header"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", c] => {
                count = Some(c.parse::<u64>().map_err(|e| Error::format("ply", format!("vertex count: {e}")))?)
            }
            ["property", ty, name] => properties.push(format!("{ty} {name}")),
            ["format", f, _] if *f != "binary_little_endian" => {
                return Err(Error::format("ply", format!("unsupported format {f}")))
            }
            _ => {}
        }
    }
    let expected = ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"];
    if properties != expected {
        return Err(Error::format("ply", format!("unsupported properties {properties:?}")));
    }
    let count = count.ok_or_else(|| Error::format("ply", "missing vertex element"))? as usize;
    let mut cloud = PointCloud {
        points: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    let mut rec = [0u8; 15];
    for _ in 0..count {
        r.read_exact(&mut rec).map_err(|e| Error::io(path, e))?;
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        cloud.points.push([f(0), f(1), f(2)]);
        cloud.colors.push([rec[12], rec[13], rec[14]]);
    }
    Ok(cloud)
}
