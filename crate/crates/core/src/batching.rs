//! Dynamic-padding batch construction: each batch is padded only to the
//! length of its own longest sequence.

use crate::data::{Encoded, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// B x L_batch token ids, PAD exactly where the mask is 0.
    pub token_ids: Vec<Vec<usize>>,
    /// mask[i][j] = true iff j < lengths[i].
    pub attention_mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn width(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn from_chunk(chunk: &[&Encoded]) -> Batch {
        let width = chunk.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(chunk.len());
        let mut attention_mask = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut lengths = Vec::with_capacity(chunk.len());
        for e in chunk {
            let mut ids = e.ids.clone();
            let mut mask = vec![true; e.ids.len()];
            ids.resize(width, PAD_ID);
            mask.resize(width, false);
            token_ids.push(ids);
            attention_mask.push(mask);
            labels.push(e.label);
            lengths.push(e.ids.len());
        }
        Batch {
            token_ids,
            attention_mask,
            labels,
            lengths,
        }
    }
}

/// Partition examples into chunks of at most `batch_size`, each padded to
/// its own max length. The last partial batch is kept. Every example
/// appears exactly once.
pub fn make_batches(
    examples: &[Encoded],
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngState,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Encoded> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_chunk(&refs)
        })
        .collect())
}

/// Fraction of padding cells avoided by dynamic padding relative to
/// padding every batch to the global max length (shuffle off).
pub fn padding_savings(examples: &[Encoded], batch_size: usize) -> Result<f64> {
    let mut rng = RngState::new(0);
    let batches = make_batches(examples, batch_size, false, &mut rng)?;
    let global_max = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let dynamic: usize = batches.iter().map(|b| b.len() * b.width()).sum();
    let fixed: usize = batches.iter().map(|b| b.len() * global_max).sum();
    Ok(1.0 - dynamic as f64 / fixed as f64)
}
