//! Pretrained word vectors in the whitespace text format: a token followed by
//! `dim` floats per line.

use std::fs;
use std::path::{Path, PathBuf};

use qgen_core::corpus::{Vocabulary, SPECIALS};
use qgen_core::params::uniform;
use qgen_core::Tensor;
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// Embedding table for `vocab` plus the number of non-special words found in
/// the file. Rows not covered keep a uniform draw from `[-0.1, 0.1]`.
pub fn parse_embeddings(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, usize), EmbeddingError> {
    let mut table = uniform(rng, &[vocab.len(), dim], 0.1);
    let mut seen = vec![false; vocab.len()];
    let mut coverage = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EmbeddingError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("nonblank line");
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("bad value `{f}`: {e}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != dim {
            return Err(err(format!("expected {dim} values for `{token}`, found {}", values.len())));
        }
        if let Some(id) = vocab.id(token) {
            table.row_mut(id).copy_from_slice(&values);
            if !seen[id] && !SPECIALS.contains(&token) {
                coverage += 1;
            }
            seen[id] = true;
        }
    }
    Ok((table, coverage))
}

pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, usize), EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|err| EmbeddingError::Io { path: path.to_path_buf(), err })?;
    parse_embeddings(&text, path, vocab, dim, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qgen_core::params::tensor_rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["cat", "dog"]).unwrap()
    }

    #[test]
    fn copies_covered_rows() {
        let v = vocab();
        let (t, cov) = parse_embeddings("cat 0.1 0.2 0.3\n", Path::new("e"), &v, 3, &mut tensor_rng(1, "e")).unwrap();
        assert_eq!(cov, 1);
        assert_eq!(t.row(v.id("cat").unwrap()), &[0.1, 0.2, 0.3]);
        assert!(t.row(v.id("dog").unwrap()).iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn full_and_empty_coverage() {
        let v = vocab();
        let (_, cov) =
            parse_embeddings("cat 1 2\ndog 3 4\nbird 5 6\n", Path::new("e"), &v, 2, &mut tensor_rng(1, "e")).unwrap();
        assert_eq!(cov, v.len() - 4);
        let (t, cov) = parse_embeddings("", Path::new("e"), &v, 2, &mut tensor_rng(1, "e")).unwrap();
        assert_eq!(cov, 0);
        assert_eq!(t.shape(), &[6, 2]);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let v = vocab();
        let err = parse_embeddings("cat 1 2\ndog 3\n", Path::new("e.txt"), &v, 2, &mut tensor_rng(1, "e")).unwrap_err();
        assert!(err.to_string().starts_with("e.txt:2:"), "{err}");
        let err = parse_embeddings("cat 1 x\n", Path::new("e.txt"), &v, 2, &mut tensor_rng(1, "e")).unwrap_err();
        assert!(err.to_string().starts_with("e.txt:1:"), "{err}");
    }
}
