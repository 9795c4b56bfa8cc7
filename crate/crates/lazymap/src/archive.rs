//! On-disk artifact archives: a directory holding `manifest.txt` plus one raw
//! little-endian f64 payload file per named array. The manifest records the
//! archive kind, the seed and config hash that produced it, and a sha256 per
//! payload, verified on load. Writing is deterministic: the same content
//! produces byte-identical files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("hex formatting");
    }
    out
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// An in-memory archive; arrays keep their creation order.
#[derive(Debug, Clone)]
pub struct Archive {
    kind: String,
    seed: u64,
    config_hash: String,
    entries: Vec<Entry>,
}

const FORMAT_LINE: &str = "format: lazymap-archive v1";

impl Archive {
    pub fn new(kind: &str, seed: u64, config_hash: &str) -> Result<Self> {
        if !valid_name(kind) {
            return Err(Error::config(format!("invalid archive kind {kind:?}")));
        }
        Ok(Archive { kind: kind.to_string(), seed, config_hash: config_hash.to_string(), entries: Vec::new() })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn push_array(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::config(format!(
                "invalid array name {name:?}: lowercase letters, digits, underscores only"
            )));
        }
        if self.contains(name) {
            return Err(Error::config(format!("duplicate array name {name:?}")));
        }
        if shape.is_empty() {
            return Err(Error::config("array shape must have at least one dimension"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::config(format!(
                "array {name:?}: shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        self.entries.push(Entry { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.push_array(name, vec![1], vec![value])
    }

    pub fn push_vector(&mut self, name: &str, v: &DVector<f64>) -> Result<()> {
        self.push_array(name, vec![v.len()], v.as_slice().to_vec())
    }

    /// Matrices are stored column-major with shape `[nrows, ncols]`.
    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.push_array(name, vec![m.nrows(), m.ncols()], m.as_slice().to_vec())
    }

    /// A stack of equally sized matrices, shape `[nrows, ncols, count]`.
    pub fn push_matrix_stack(&mut self, name: &str, ms: &[DMatrix<f64>]) -> Result<()> {
        if ms.is_empty() {
            return Err(Error::config("matrix stack must be nonempty"));
        }
        let (r, c) = (ms[0].nrows(), ms[0].ncols());
        let mut data = Vec::with_capacity(r * c * ms.len());
        for m in ms {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::config("matrix stack entries differ in shape"));
            }
            data.extend_from_slice(m.as_slice());
        }
        self.push_array(name, vec![r, c, ms.len()], data)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::config(format!("archive {:?} has no array {name:?}", self.kind)))
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name)?;
        Ok((&e.shape, &e.data))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let e = self.entry(name)?;
        if e.data.len() != 1 {
            return Err(Error::config(format!("array {name:?} is not a scalar")));
        }
        Ok(e.data[0])
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let e = self.entry(name)?;
        if e.shape.len() != 1 {
            return Err(Error::config(format!("array {name:?} has rank {}, expected 1", e.shape.len())));
        }
        Ok(DVector::from_column_slice(&e.data))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let e = self.entry(name)?;
        if e.shape.len() != 2 {
            return Err(Error::config(format!("array {name:?} has rank {}, expected 2", e.shape.len())));
        }
        Ok(DMatrix::from_column_slice(e.shape[0], e.shape[1], &e.data))
    }

    pub fn matrix_stack(&self, name: &str) -> Result<Vec<DMatrix<f64>>> {
        let e = self.entry(name)?;
        if e.shape.len() != 3 {
            return Err(Error::config(format!("array {name:?} has rank {}, expected 3", e.shape.len())));
        }
        let (r, c, k) = (e.shape[0], e.shape[1], e.shape[2]);
        Ok((0..k).map(|i| DMatrix::from_column_slice(r, c, &e.data[i * r * c..(i + 1) * r * c])).collect())
    }

    fn payload_bytes(data: &[f64]) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(8 * data.len());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    fn manifest_text(&self, hashes: &[String]) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "{FORMAT_LINE}");
        let _ = writeln!(text, "kind: {}", self.kind);
        let _ = writeln!(text, "dtype: f64le");
        let _ = writeln!(text, "seed: {}", self.seed);
        let _ = writeln!(text, "config: {}", self.config_hash);
        let _ = writeln!(text, "arrays: {}", self.entries.len());
        for (e, hash) in self.entries.iter().zip(hashes) {
            let shape =
                e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(text, "array: {} shape={shape} sha256={hash}", e.name);
        }
        text
    }

    /// Writes the archive into `dir`, creating it if needed. Stale payload
    /// files from a previous archive in the same directory are removed first
    /// so rewrites are byte-for-byte reproducible.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for existing in std::fs::read_dir(dir)? {
            let path = existing?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "manifest.txt" || name.ends_with(".bin") {
                std::fs::remove_file(&path)?;
            }
        }
        let mut hashes = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let bytes = Self::payload_bytes(&e.data);
            hashes.push(sha256_hex(&bytes));
            std::fs::write(dir.join(format!("{}.bin", e.name)), &bytes)?;
        }
        std::fs::write(dir.join("manifest.txt"), self.manifest_text(&hashes))?;
        Ok(())
    }

    /// Loads an archive, verifying every payload against its manifest hash
    /// and declared size.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::config(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut lines = text.lines();
        let corrupt = |what: &str| Error::config(format!("{}: {what}", manifest_path.display()));

        if lines.next() != Some(FORMAT_LINE) {
            return Err(corrupt("not a recognized archive manifest"));
        }
        let mut field = |prefix: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(prefix))
                .map(str::to_string)
                .ok_or_else(|| Error::config(format!("{}: missing {prefix:?} line", manifest_path.display())))
        };
        let kind = field("kind: ")?;
        if field("dtype: ")? != "f64le" {
            return Err(corrupt("unsupported dtype"));
        }
        let seed: u64 = field("seed: ")?.parse().map_err(|_| corrupt("bad seed"))?;
        let config_hash = field("config: ")?;
        let count: usize = field("arrays: ")?.parse().map_err(|_| corrupt("bad array count"))?;

        let mut archive = Archive::new(&kind, seed, &config_hash)?;
        let mut seen = HashSet::new();
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| corrupt("truncated array list"))?;
            let rest = line.strip_prefix("array: ").ok_or_else(|| corrupt("bad array line"))?;
            let mut parts = rest.split(' ');
            let name = parts.next().unwrap_or("").to_string();
            let shape_part = parts
                .next()
                .and_then(|p| p.strip_prefix("shape="))
                .ok_or_else(|| corrupt("bad shape field"))?;
            let hash_part = parts
                .next()
                .and_then(|p| p.strip_prefix("sha256="))
                .ok_or_else(|| corrupt("bad hash field"))?;
            if !seen.insert(name.clone()) {
                return Err(corrupt("duplicate array name"));
            }
            let shape: Vec<usize> = shape_part
                .split('x')
                .map(|d| d.parse().map_err(|_| corrupt("bad shape value")))
                .collect::<Result<_>>()?;

            let payload_path = dir.join(format!("{name}.bin"));
            let bytes = std::fs::read(&payload_path).map_err(|e| {
                Error::config(format!("cannot read {}: {e}", payload_path.display()))
            })?;
            let len: usize = shape.iter().product();
            if bytes.len() != 8 * len {
                return Err(Error::config(format!(
                    "{}: expected {} bytes for shape {shape:?}, found {}",
                    payload_path.display(),
                    8 * len,
                    bytes.len()
                )));
            }
            if sha256_hex(&bytes) != hash_part {
                return Err(Error::config(format!(
                    "{}: payload hash does not match the manifest",
                    payload_path.display()
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            archive.entries.push(Entry { name, shape, data });
        }
        Ok(archive)
    }
}
