//! Glue between trained models and the evaluation stage.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalrank::{evaluate_embeddings, Metrics, RerankConfig, Split, SplitEntry};
use crate::learn::{forward, histogram_grid, EmbeddingModel};
use crate::imageio::load_image;
use crate::relational::DatasetManifest;

/// Embeddings of every manifest image, in manifest order.
pub fn embed_manifest(model: &EmbeddingModel, manifest: &DatasetManifest, input_size: usize) -> Result<Vec<Vec<f64>>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let path = manifest.resolve(i);
            load_image(&path)
                .and_then(|img| histogram_grid(&img, input_size))
                .and_then(|x| forward(model, &x).map(|(e, _)| e))
                .map_err(|e| Error::Image {
                    index: i,
                    path,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Scores `vectors` under a query/gallery split. Split indices address
/// `vectors`; the split's ids decide matches.
pub fn evaluate_split(vectors: &[Vec<f64>], split: &[SplitEntry], rerank: Option<&RerankConfig>) -> Result<Metrics> {
    let mut q = Vec::new();
    let mut q_ids = Vec::new();
    let mut g = Vec::new();
    let mut g_ids = Vec::new();
    for e in split {
        let v = vectors.get(e.index).ok_or(Error::Index {
            index: e.index,
            len: vectors.len(),
        })?;
        match e.split {
            Split::Query => {
                q.push(v.clone());
                q_ids.push(e.id.as_str());
            }
            Split::Gallery => {
                g.push(v.clone());
                g_ids.push(e.id.as_str());
            }
        }
    }
    evaluate_embeddings(&q, &q_ids, &g, &g_ids, rerank)
}

/// Checks that split rows agree with the manifest's identities.
pub fn check_split(manifest: &DatasetManifest, split: &[SplitEntry]) -> Result<()> {
    for e in split {
        let entry = manifest.entries.get(e.index).ok_or(Error::Index {
            index: e.index,
            len: manifest.len(),
        })?;
        if entry.id != e.id {
            return Err(Error::Format(format!(
                "split row {} names id {:?} but the manifest has {:?}",
                e.index, e.id, entry.id
            )));
        }
    }
    Ok(())
}
