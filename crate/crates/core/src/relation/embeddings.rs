use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_distr::{Distribution, StandardNormal};

use super::RelationError;
use crate::seed;
use crate::synth::Scene;

/// One frozen vector per entity class.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbeddingTable {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

fn ppmi(counts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: f64 = counts.iter().flatten().sum();
    if total == 0.0 {
        return counts.to_vec();
    }
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..counts[0].len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    counts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, &c)| if c == 0.0 { 0.0 } else { (c * total / (rows[i] * cols[j])).ln().max(0.0) })
                .collect()
        })
        .collect()
}

impl SemanticEmbeddingTable {
    /// Builds class vectors from co-occurrence statistics of the training
    /// scenes: PPMI of (class as subject, predicate), (class as object,
    /// predicate), (subject, object class) and (object, subject class),
    /// concatenated, randomly projected to `dim` and L2-normalized.
    pub fn from_cooccurrence(
        scenes: &[Scene],
        num_classes: usize,
        num_predicates: usize,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut subj_pred = vec![vec![0.0; num_predicates]; num_classes];
        let mut obj_pred = vec![vec![0.0; num_predicates]; num_classes];
        let mut subj_obj = vec![vec![0.0; num_classes]; num_classes];
        for s in scenes {
            for e in &s.gt_edges {
                let (a, b) = (s.gt_entities[e.subj].label, s.gt_entities[e.obj].label);
                subj_pred[a][e.predicate] += 1.0;
                obj_pred[b][e.predicate] += 1.0;
                subj_obj[a][b] += 1.0;
            }
        }
        let obj_subj: Vec<Vec<f64>> =
            (0..num_classes).map(|b| (0..num_classes).map(|a| subj_obj[a][b]).collect()).collect();
        let blocks = [ppmi(&subj_pred), ppmi(&obj_pred), ppmi(&subj_obj), ppmi(&obj_subj)];
        let raw_dim = 2 * num_predicates + 2 * num_classes;
        let mut rng = seed::rng(seed, "semantic-projection", &[]);
        let proj: Vec<f64> = (0..raw_dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows = (0..num_classes)
            .map(|c| {
                let raw: Vec<f64> = blocks.iter().flat_map(|b| b[c].iter().copied()).collect();
                let mut v: Vec<f64> =
                    (0..dim).map(|k| (0..raw_dim).map(|r| raw[r] * proj[r * dim + k]).sum()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        Self { dim, rows }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, class: usize) -> Result<&[f64], RelationError> {
        self.rows.get(class).map(Vec::as_slice).ok_or(RelationError::UnknownClass { class, classes: self.rows.len() })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Layout: `u64` class count, `u64` dim, then row-major little-endian `f64`.
pub fn save_embedding_table(path: &Path, table: &SemanticEmbeddingTable) -> Result<(), RelationError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_u64::<LittleEndian>(table.rows.len() as u64)?;
    w.write_u64::<LittleEndian>(table.dim as u64)?;
    for v in table.rows.iter().flatten() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embedding_table(path: &Path) -> Result<SemanticEmbeddingTable, RelationError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let classes = r.read_u64::<LittleEndian>()? as usize;
    let dim = r.read_u64::<LittleEndian>()? as usize;
    if dim == 0 || classes == 0 || classes.checked_mul(dim).is_none_or(|n| n > (1 << 28)) {
        return Err(RelationError::Table(format!("implausible header {classes} x {dim}")));
    }
    let mut rows = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut row = vec![0.0; dim];
        r.read_f64_into::<LittleEndian>(&mut row)?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RelationError::Table("non-finite entry".into()));
        }
        rows.push(row);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(RelationError::Table(format!("{} trailing bytes", rest.len())));
    }
    Ok(SemanticEmbeddingTable { dim, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, WorldConfig, WorldSpec};

    #[test]
    fn rows_are_unit_and_distinct() {
        let spec = WorldSpec::build(WorldConfig::default()).unwrap();
        let scenes: Vec<_> = (0..200).map(|s| generate_scene(&spec, s)).collect();
        let t = SemanticEmbeddingTable::from_cooccurrence(&scenes, 10, 8, 32, 1);
        assert_eq!(t.num_classes(), 10);
        for (i, r) in t.rows.iter().enumerate() {
            assert!((r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for other in &t.rows[..i] {
                assert_ne!(r, other);
            }
        }
        assert!(matches!(t.row(10), Err(RelationError::UnknownClass { class: 10, classes: 10 })));
    }

    #[test]
    fn file_round_trip() {
        let t = SemanticEmbeddingTable { dim: 3, rows: vec![vec![1.0, -2.5, 0.125], vec![0.0, 1e-300, 7.0]] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        save_embedding_table(&p, &t).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 6 * 8);
        assert_eq!(load_embedding_table(&p).unwrap(), t);
        std::fs::write(&p, [0u8; 10]).unwrap();
        assert!(load_embedding_table(&p).is_err());
    }
}
