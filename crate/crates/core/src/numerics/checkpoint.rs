//! On-disk checkpoint format.
//!
//! A directory holds `manifest.txt` (a version line, then one
//! `group name rows cols` line per tensor) and one `<group>.bin` file per
//! group containing the tensors back to back as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamSet;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "mrs-checkpoint v1";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    groups: BTreeMap<String, Vec<(String, Matrix)>>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') {
        return Err(Error::Checkpoint(format!("invalid {what} name {s:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Matrix) -> Result<()> {
        check_token("group", group)?;
        check_token("tensor", name)?;
        let entries = self.groups.entry(group.to_string()).or_default();
        if entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {group}/{name}")));
        }
        entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn add_params(&mut self, group: &str, set: &ParamSet) -> Result<()> {
        for (_, name, t) in set.iter() {
            self.add(group, name, t.value.clone())?;
        }
        Ok(())
    }

    /// Stores a list of same-role matrices (e.g. optimizer moments) as
    /// `prefix.0`, `prefix.1`, ...
    pub fn add_list(&mut self, group: &str, prefix: &str, values: &[Matrix]) -> Result<()> {
        for (i, m) in values.iter().enumerate() {
            self.add(group, &format!("{prefix}.{i}"), m.clone())?;
        }
        Ok(())
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn group(&self, group: &str) -> Result<&[(String, Matrix)]> {
        self.groups
            .get(group)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing group {group}")))
    }

    pub fn get(&self, group: &str, name: &str) -> Result<&Matrix> {
        self.group(group)?
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {group}/{name}")))
    }

    pub fn get_list(&self, group: &str, prefix: &str, len: usize) -> Result<Vec<Matrix>> {
        (0..len)
            .map(|i| self.get(group, &format!("{prefix}.{i}")).cloned())
            .collect()
    }

    /// Copies stored values into `set`; names and shapes must agree.
    pub fn load_params(&self, group: &str, set: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = set.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let m = self.get(group, name)?;
            let dst = &mut set.tensors_mut()[i].value;
            if m.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {group}/{name} has shape {:?}, expected {:?}",
                    m.shape(),
                    dst.shape()
                )));
            }
            *dst = m.clone();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{FORMAT_VERSION}\n");
        for (group, entries) in &self.groups {
            let mut bytes = Vec::new();
            for (name, m) in entries {
                manifest.push_str(&format!("{group} {name} {} {}\n", m.rows(), m.cols()));
                for v in m.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let path = dir.join(format!("{group}.bin"));
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(v) if v == FORMAT_VERSION => {}
            other => {
                return Err(Error::Version(format!(
                    "expected {FORMAT_VERSION:?}, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut layout: BTreeMap<String, Vec<(String, usize, usize)>> = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [g, name, r, c] => r
                    .parse()
                    .ok()
                    .zip(c.parse().ok())
                    .map(|(r, c)| (g.to_string(), name.to_string(), r, c)),
                _ => None,
            };
            let (g, name, r, c) = parsed.ok_or_else(|| {
                Error::Checkpoint(format!("malformed manifest line {}: {line:?}", n + 2))
            })?;
            layout.entry(g).or_default().push((name, r, c));
        }
        let mut ckpt = Checkpoint::new();
        for (group, entries) in layout {
            let path = dir.join(format!("{group}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut offset = 0;
            for (name, r, c) in entries {
                let need = r * c * 8;
                if bytes.len() < offset + need {
                    return Err(Error::Checkpoint(format!(
                        "tensor {group}/{name} truncated: needs {need} bytes, {} available",
                        bytes.len().saturating_sub(offset)
                    )));
                }
                let data = bytes[offset..offset + need]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                offset += need;
                ckpt.add(&group, &name, Matrix::from_vec(r, c, data))?;
            }
            if offset != bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "group {group} has {} trailing bytes",
                    bytes.len() - offset
                )));
            }
        }
        Ok(ckpt)
    }
}
