//! Particle sets and their on-disk format.
//!
//! A dump is a CSV file with header `x0,x1,...,x{d-1}` (one particle per row)
//! plus a sibling `.json` file holding [`RunMeta`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Provenance of a particle set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub sampler: String,
    pub seed: u64,
    pub budget: Option<u64>,
    /// Snapshot of the schedule that produced the set.
    pub schedule: serde_json::Value,
    pub grad_total: u64,
    pub grad_per_particle: f64,
    pub particles: usize,
    pub dim: usize,
}

/// `N` points in `R^d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    points: Vec<f64>,
    pub meta: RunMeta,
}

impl ParticleSet {
    pub fn from_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("particle dimension must be positive"));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not split into rows of {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Ok(Self {
            dim,
            points,
            meta: RunMeta {
                particles: n,
                dim,
                ..RunMeta::default()
            },
        })
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            flat.extend(r);
        }
        Self::from_flat(dim, flat)
    }

    pub fn empty(dim: usize) -> Self {
        Self::from_flat(dim, Vec::new()).expect("positive dimension")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|v| v.is_finite())
    }

    /// Per-coordinate mean and population variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for r in self.rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        (mean, var)
    }
}

/// Path of the meta file that accompanies `csv_path`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the CSV and its meta JSON. Floats are written in shortest
/// round-trip form, so a read-back is bit-exact.
pub fn dump_particles(set: &ParticleSet, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let header: Vec<String> = (0..set.dim()).map(|k| format!("x{k}")).collect();
    w.write_record(&header).map_err(csv_err)?;
    let mut buf = Vec::with_capacity(set.dim());
    for r in set.rows() {
        buf.clear();
        buf.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&buf).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let mp = meta_path(path);
    let mut meta = set.meta.clone();
    meta.particles = set.len();
    meta.dim = set.dim();
    let mut f = BufWriter::new(File::create(&mp).map_err(|e| Error::io(&mp, e))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&mp, e))?;
    f.flush().map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

/// Reads a dump written by [`dump_particles`]. The meta file is optional.
pub fn read_particles(path: &Path) -> Result<ParticleSet> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let dim = r.headers().map_err(csv_err)?.len();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{}: bad number {field:?}", path.display())))?;
            flat.push(v);
        }
    }
    let mut set = ParticleSet::from_flat(dim, flat)?;
    let mp = meta_path(path);
    if mp.exists() {
        let f = File::open(&mp).map_err(|e| Error::io(&mp, e))?;
        set.meta = serde_json::from_reader(BufReader::new(f))?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.csv");
        let mut rng = RngStream::new(1);
        let flat: Vec<f64> = (0..2000).map(|_| rng.normal() * 1e3).collect();
        let mut set = ParticleSet::from_flat(2, flat).unwrap();
        set.meta.sampler = "test".into();
        set.meta.seed = 1;
        dump_particles(&set, &p).unwrap();
        let back = read_particles(&p).unwrap();
        assert_eq!(back.as_flat(), set.as_flat());
        assert_eq!(back.meta.sampler, "test");
        assert_eq!(back.meta.particles, 1000);
    }

    #[test]
    fn empty_set_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        dump_particles(&ParticleSet::empty(3), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.trim_end(), "x0,x1,x2");
        let back = read_particles(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 3);
    }

    #[test]
    fn io_errors_carry_path() {
        let err = read_particles(Path::new("/nonexistent/dir/set.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/set.csv"));
    }
}
