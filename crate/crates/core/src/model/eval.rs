use super::LanguageModel;
use crate::error::{Error, Result};

/// Windows evaluated per forward pass.
pub const EVAL_BATCH: usize = 8;

/// Mean next-token negative log-likelihood over non-overlapping windows of
/// `seq_len` tokens; a trailing partial window is dropped. Each window
/// contributes `seq_len - 1` predictions.
pub fn mean_log_loss(model: &LanguageModel, tokens: &[usize], seq_len: usize) -> Result<f64> {
    if seq_len < 2 {
        return Err(Error::Config(format!("evaluation seq_len must be >= 2, got {seq_len}")));
    }
    let windows = tokens.len() / seq_len;
    if windows == 0 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one evaluation window of {seq_len}",
            tokens.len()
        )));
    }
    let vocab = model.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < windows {
        let batch = EVAL_BATCH.min(windows - start);
        let chunk = &tokens[start * seq_len..(start + batch) * seq_len];
        let logits = model.forward(chunk, batch)?;
        let data = logits.data();
        for (pos, &next) in chunk.iter().enumerate().skip(1) {
            if pos % seq_len == 0 {
                continue;
            }
            let row = &data[(pos - 1) * vocab..pos * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += log_z - row[next];
            count += 1;
        }
        start += batch;
    }
    Ok(total / count as f64)
}

/// `exp` of [`mean_log_loss`].
pub fn perplexity(model: &LanguageModel, tokens: &[usize], seq_len: usize) -> Result<f64> {
    Ok(mean_log_loss(model, tokens, seq_len)?.exp())
}
