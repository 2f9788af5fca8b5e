//! Seeded synthetic tasks: linear-teacher regression and a character-level
//! language model over sentences from a tiny probabilistic grammar.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub const TEACHER_NOISE: f64 = 0.01;

const SUBJECTS: [&str; 5] = ["the cat", "a dog", "my bird", "tom", "the old fox"];
const VERBS: [&str; 4] = ["sees", "eats", "likes", "finds"];
const OBJECTS: [&str; 5] = ["the fish", "a bone", "milk", "seeds", "a red ball"];
const ADVERBS: [&str; 3] = ["slowly", "today", "again"];

/// Sorted character set of the grammar.
pub fn char_vocab() -> Vec<char> {
    let mut v: Vec<char> = SUBJECTS
        .iter()
        .chain(&VERBS)
        .chain(&OBJECTS)
        .chain(&ADVERBS)
        .flat_map(|w| w.chars())
        .chain([' ', '.'])
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Sentences `subject verb object [adverb]. ` drawn with fixed weights.
pub fn grammar_text(rng: &mut Rng, sentences: usize) -> String {
    let mut s = String::new();
    for _ in 0..sentences {
        // skewed choice: earlier words are more frequent
        let pick = |rng: &mut Rng, words: &[&'static str]| -> &'static str {
            let u = rng.uniform();
            words[((u * u) * words.len() as f64) as usize]
        };
        s.push_str(pick(rng, &SUBJECTS));
        s.push(' ');
        s.push_str(pick(rng, &VERBS));
        s.push(' ');
        s.push_str(pick(rng, &OBJECTS));
        if rng.uniform() < 0.3 {
            s.push(' ');
            s.push_str(pick(rng, &ADVERBS));
        }
        s.push_str(". ");
    }
    s
}

/// One training or validation example: network input and target.
#[derive(Clone, Debug)]
pub enum Example {
    /// Regression target, same shape as the output.
    Dense { x: Matrix, y: Matrix },
    /// One-hot input rows and next-character indices.
    Tokens { x: Matrix, next: Vec<usize> },
}

impl Example {
    pub fn input(&self) -> &Matrix {
        match self {
            Example::Dense { x, .. } | Example::Tokens { x, .. } => x,
        }
    }

    /// Loss and its gradient with respect to the network output.
    pub fn loss_grad(&self, out: &Matrix) -> Result<(f64, Matrix)> {
        match self {
            Example::Dense { y, .. } => mse(out, y),
            Example::Tokens { next, .. } => cross_entropy(out, next),
        }
    }

    pub fn loss(&self, out: &Matrix) -> Result<f64> {
        Ok(self.loss_grad(out)?.0)
    }

    /// Tokens (rows) this example contributes.
    pub fn tokens(&self) -> usize {
        self.input().rows()
    }
}

/// Mean squared error over all entries.
pub fn mse(out: &Matrix, y: &Matrix) -> Result<(f64, Matrix)> {
    out.ensure_same_shape(y, "mse target")?;
    let n = out.len() as f64;
    let d = out.sub(y)?;
    let loss = d.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, d.scale(2.0 / n)))
}

/// Mean next-token cross-entropy over rows of logits.
pub fn cross_entropy(logits: &Matrix, next: &[usize]) -> Result<(f64, Matrix)> {
    if next.len() != logits.rows() {
        return Err(Error::Shape(format!("{} targets for {} rows", next.len(), logits.rows())));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &t) in next.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Shape(format!("target {t} outside vocabulary of {}", logits.cols())));
        }
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += z.ln() + mx - row[t];
        let g = grad.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - mx).exp() / z / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Task state: teacher matrix or encoded corpora.
#[derive(Clone, Debug)]
pub enum TaskData {
    Teacher { a: Matrix, rows: usize },
    Chars { train: Vec<usize>, val: Vec<usize>, vocab: usize, seq_len: usize },
}

impl TaskData {
    /// Linear teacher `y = x Aᵀ + noise` with `A ~ N(0, 1/width)`; each
    /// example has `rows` samples.
    pub fn teacher(width: usize, rows: usize, rng: &mut Rng) -> Self {
        let a = rng.normal_matrix(width, width, 1.0 / (width as f64).sqrt());
        TaskData::Teacher { a, rows }
    }

    /// Train and validation text from independent grammar streams.
    pub fn chars(seq_len: usize, rng: &Rng) -> Self {
        let vocab = char_vocab();
        let encode = |s: String| -> Vec<usize> {
            s.chars()
                .map(|c| vocab.binary_search(&c).expect("grammar character"))
                .collect()
        };
        let train = encode(grammar_text(&mut rng.split(101), 2000));
        let val = encode(grammar_text(&mut rng.split(102), 200));
        TaskData::Chars {
            train,
            val,
            vocab: vocab.len(),
            seq_len,
        }
    }

    pub fn sample(&self, rng: &mut Rng, validation: bool) -> Example {
        match self {
            TaskData::Teacher { a, rows } => {
                let x = rng.normal_matrix(*rows, a.cols(), 1.0);
                let mut y = x.matmul_t(a).expect("teacher shape");
                let noise = rng.normal_matrix(*rows, a.rows(), TEACHER_NOISE);
                y.add_assign(&noise).expect("same shape");
                Example::Dense { x, y }
            }
            TaskData::Chars {
                train,
                val,
                vocab,
                seq_len,
            } => {
                let text = if validation { val } else { train };
                let start = rng.below(text.len() - seq_len - 1);
                let x = Matrix::from_fn(*seq_len, *vocab, |r, c| {
                    if text[start + r] == c {
                        1.0
                    } else {
                        0.0
                    }
                });
                let next = text[start + 1..start + 1 + seq_len].to_vec();
                Example::Tokens { x, next }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]).unwrap();
        let (l, g) = cross_entropy(&logits, &[1, 2]).unwrap();
        let p0 = 2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp());
        let want = (-(p0.ln()) + 3f64.ln()) / 2.0;
        assert!((l - want).abs() < 1e-14);
        let h = 1e-6;
        let mut lp = logits.clone();
        lp.data_mut()[0] += h;
        let mut lm = logits.clone();
        lm.data_mut()[0] -= h;
        let fd = (cross_entropy(&lp, &[1, 2]).unwrap().0 - cross_entropy(&lm, &[1, 2]).unwrap().0) / (2.0 * h);
        assert!((fd - g[(0, 0)]).abs() < 1e-8);
    }

    #[test]
    fn grammar_is_seeded_and_in_vocab() {
        let a = grammar_text(&mut Rng::new(1), 20);
        assert_eq!(a, grammar_text(&mut Rng::new(1), 20));
        let v = char_vocab();
        assert!(a.chars().all(|c| v.contains(&c)));
        assert!(a.ends_with(". "));
    }
}
