//! `GSTK1` multi-channel raster container.
//!
//! Layout: the five magic bytes `GSTK1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then `channels · height · width` little-endian `f64`
//! values, channel by channel, each channel row-major. Row `r` of the raster
//! sits at `y0 + r·dy`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::PixelGrid;

pub const MAGIC: &str = "GSTK1";
pub const DTYPE: &str = "f64le";
const MAX_HEADER: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub magic: String,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<String>,
    /// Center of pixel (0, 0).
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub dtype: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct GridStack {
    header: GridHeader,
    data: Vec<f64>,
}

impl PartialEq for GridStack {
    /// Bitwise payload comparison so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl GridStack {
    pub fn new(grid: PixelGrid, channels: Vec<String>, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        ensure!(!channels.is_empty(), "grid stack needs at least one channel");
        ensure!(
            data.len() == channels.len() * grid.len(),
            "payload has {} values, expected {} channels x {} x {}",
            data.len(),
            channels.len(),
            grid.height,
            grid.width
        );
        let mut seen = std::collections::BTreeSet::new();
        for c in &channels {
            ensure!(seen.insert(c.as_str()), "duplicate channel name '{c}'");
        }
        Ok(GridStack {
            header: GridHeader {
                magic: MAGIC.to_string(),
                height: grid.height,
                width: grid.width,
                channels,
                origin: [grid.x0, grid.y0],
                spacing: [grid.dx, grid.dy],
                dtype: DTYPE.to_string(),
                metadata: BTreeMap::new(),
                seed: None,
            },
            data,
        })
    }

    /// Builds a stack from per-channel slices.
    pub fn from_channels(grid: PixelGrid, channels: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(channels.len());
        let mut data = Vec::with_capacity(channels.len() * grid.len());
        for (name, values) in channels {
            ensure!(
                values.len() == grid.len(),
                "channel '{name}' has {} values, expected {}",
                values.len(),
                grid.len()
            );
            names.push(name);
            data.extend_from_slice(&values);
        }
        Self::new(grid, names, data)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.header.seed = Some(seed);
        self
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.header.metadata.insert(key.to_string(), value);
        self
    }

    pub fn header(&self) -> &GridHeader {
        &self.header
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.header.metadata
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid {
            height: self.header.height,
            width: self.header.width,
            x0: self.header.origin[0],
            y0: self.header.origin[1],
            dx: self.header.spacing[0],
            dy: self.header.spacing[1],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.header.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.header.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.header.channels.iter().position(|c| c == name)
    }

    pub fn channel_at(&self, i: usize) -> &[f64] {
        let n = self.header.height * self.header.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channel_index(name)
            .map(|i| self.channel_at(i))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "channel '{name}' not found (have: {})",
                    self.header.channels.join(", ")
                ))
            })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Format(format!("cannot encode grid header: {e}")))?;
        let io = |e| Error::Format(format!("write failed: {e}"));
        w.write_all(MAGIC.as_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |what: &str| Error::Format(what.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated grid stack: missing magic"))?;
        if magic != *MAGIC.as_bytes() {
            return Err(fmt("not a GSTK1 grid stack (bad magic)"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| fmt("truncated grid stack: missing header length"))?;
        let len = u32::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(fmt("grid stack header is implausibly large"));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)
            .map_err(|_| fmt("truncated grid stack header"))?;
        let header: GridHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("invalid grid stack header: {e}")))?;
        if header.magic != MAGIC || header.dtype != DTYPE {
            return Err(Error::Format(format!(
                "unsupported grid stack ({} / {})",
                header.magic, header.dtype
            )));
        }
        let n = header
            .channels
            .len()
            .checked_mul(header.height)
            .and_then(|v| v.checked_mul(header.width))
            .ok_or_else(|| fmt("grid stack dimensions overflow"))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| Error::Format(format!("cannot read payload: {e}")))?;
        if payload.len() != n * 8 {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                n * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let stack = GridStack { header, data };
        stack.grid().validate()?;
        Ok(stack)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
