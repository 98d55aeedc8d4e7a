//! Network topology, weights and the forward pass.

pub mod forward;
pub mod init;
pub mod topology;
pub mod weights;

use std::path::Path;

use crate::error::{Error, Result};

/// The `k` most probable classes, descending; ties go to the lower class id.
pub fn top_k(probs: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if k > probs.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds the class count {}", probs.len())));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, probs[i])).collect())
}

/// Reads a labels file: one class name per line, class id = line number - 1.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.trim_end().to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ties_by_id() {
        let p = vec![0.001; 1000];
        let ids: Vec<usize> = top_k(&p, 5).unwrap().iter().map(|e| e.0).collect();
        assert_eq!(ids, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn one_hot() {
        let mut p = vec![0.0; 1000];
        p[42] = 1.0;
        assert_eq!(top_k(&p, 5).unwrap()[0], (42, 1.0));
    }

    #[test]
    fn bad_k() {
        assert!(top_k(&[0.5, 0.5], 0).is_err());
        assert!(top_k(&[0.5, 0.5], 3).is_err());
    }
}
