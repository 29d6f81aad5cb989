//! Embedding dump: one CSV row per record with its vector.

use std::path::Path;

use super::dataset::{Dataset, Role};
use super::train::embed_split;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::networks::Pipeline;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub role: Role,
    pub id: usize,
    pub label: Label,
    pub species: String,
    pub vector: Vec<f64>,
}

/// Embeds every split and writes `role,id,label,species,e0..`; floats use
/// the shortest representation that parses back to the same value.
pub fn dump_embeddings(pipeline: &Pipeline, data: &Dataset, path: &Path) -> Result<usize> {
    let mut writer = csv::Writer::from_path(path)?;
    let dim = pipeline.extractor.embed_dim();
    let mut header = vec!["role".to_string(), "id".into(), "label".into(), "species".into()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    writer.write_record(&header)?;
    let mut rows = 0;
    for split in data.splits() {
        let emb = embed_split(pipeline, split)?;
        for (r, record) in split.records.iter().enumerate() {
            let mut fields = vec![
                split.role.to_string(),
                record.id.to_string(),
                record.label.to_string(),
                record.species.clone(),
            ];
            fields.extend(emb.vectors.item(r).iter().map(f64::to_string));
            writer.write_record(&fields)?;
            rows += 1;
        }
    }
    writer.flush()?;
    Ok(rows)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason,
        };
        if record.len() < 4 {
            return Err(err(format!("expected at least 4 fields, found {}", record.len())));
        }
        let vector = record
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|e| err(format!("bad value {v:?}: {e}"))))
            .collect::<Result<_>>()?;
        out.push(EmbeddingRow {
            role: record[0].parse().map_err(|e: Error| err(e.to_string()))?,
            id: record[1].parse().map_err(|e| err(format!("bad id: {e}")))?,
            label: record[2].parse().map_err(|e: Error| err(e.to_string()))?,
            species: record[3].to_string(),
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{RunConfig, SplitCounts};
    use crate::harness::dataset::synth_dataset;
    use crate::harness::train::build_pipeline;

    #[test]
    fn dump_matches_direct_embedding() {
        let config = RunConfig {
            image_size: 8,
            generator_channels: 4,
            generator_blocks: 1,
            extractor_channels: vec![4],
            embed_dim: 3,
            ..Default::default()
        };
        let data = synth_dataset([SplitCounts::balanced(6); 3], 8, 4).unwrap();
        let pipeline = build_pipeline(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        assert_eq!(dump_embeddings(&pipeline, &data, &path).unwrap(), 18);
        let rows = read_embeddings(&path).unwrap();
        assert_eq!(rows.len(), 18);
        let record = &data.dev.records[2];
        let row = rows.iter().find(|r| r.role == Role::Dev && r.id == record.id).unwrap();
        let single = record.pixels.clone().reshape(&[1, 8, 8, 3]).unwrap();
        assert_eq!(row.vector, pipeline.embed(&single).unwrap().data());
        assert_eq!((row.label, row.species.as_str()), (record.label, record.species.as_str()));
    }
}
