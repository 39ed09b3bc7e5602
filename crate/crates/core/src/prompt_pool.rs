//! Learnable weather sub-prompt pool with key-matched top-k selection.
//!
//! The pool holds `N` sub-prompts of `L_s` tokens each plus one matching key
//! per sub-prompt. A query vector summarizing the current latent picks the
//! `k` keys with the highest cosine similarity; the matched sub-prompts
//! concatenate (descending similarity, ties to the lower pool index) into
//! the weather prompt the denoiser attends over. Selection is hard: the
//! chosen sub-prompt tokens receive gradients through the concatenation,
//! unselected ones receive exactly zero, and keys learn only through the
//! contrastive prompt loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::params::{join, Init, ParamStore};
use crate::weather_synth::WeatherLabel;

/// Norm guard in cosine similarity; zero vectors compare as 0.
pub const COSINE_EPS: f64 = 1e-12;

/// `a . b / (max(|a|, eps) * max(|b|, eps))`, clamped into [-1, 1].
/// Lengths must match.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "cosine similarity needs equal lengths");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = na.sqrt().max(COSINE_EPS) * nb.sqrt().max(COSINE_EPS);
    (dot / denom).clamp(-1.0, 1.0) as f32
}

/// Indices of the `k` largest values, descending; equal values take the
/// lower index first.
pub fn topk_indices(values: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::SelectionRange(format!(
            "k = {k} outside 1..={}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

/// Spatial mean of a channels-last feature map: `[H, W, D]` gives `[D]`,
/// `[B, H, W, D]` gives `[B, D]`.
pub fn mean_pool_query(f_e: &Tensor) -> Result<Tensor> {
    match *f_e.dims() {
        [h, w, _] if h > 0 && w > 0 => Ok(f_e.mean(0)?.mean(0)?),
        [_, h, w, _] if h > 0 && w > 0 => Ok(f_e.mean(1)?.mean(1)?),
        ref d => Err(Error::shape(format!(
            "mean pool expects [H,W,D] or [B,H,W,D] with nonempty spatial dims, got {d:?}"
        ))),
    }
}

/// Concatenated selection result for one query.
#[derive(Debug, Clone)]
pub struct WeatherPrompt {
    /// `[k * L_s, D]`, selected sub-prompts in `selected_indices` order.
    pub tokens: Tensor,
    /// Pool indices in descending-similarity order.
    pub selected_indices: Vec<usize>,
}

pub struct PromptPool {
    prompts: Var,
    keys: Var,
    n: usize,
    tokens: usize,
    dim: usize,
}

impl PromptPool {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        n: usize,
        tokens: usize,
        dim: usize,
    ) -> Result<Self> {
        if n == 0 || tokens == 0 || dim == 0 {
            return Err(Error::config("pool size, tokens and dim must all be positive"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let prompts = ps.var(
            &join(name, "prompts"),
            &[n, tokens, dim],
            Init::Uniform(-bound, bound),
        )?;
        let keys = ps.var(&join(name, "keys"), &[n, dim], Init::Uniform(-bound, bound))?;
        Ok(Self { prompts, keys, n, tokens, dim })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn sub_prompt_tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[N, D]` key matrix variable (trained by the contrastive prompt loss).
    pub fn keys(&self) -> &Var {
        &self.keys
    }

    /// `[N, L_s, D]` sub-prompt token variable.
    pub fn prompts(&self) -> &Var {
        &self.prompts
    }

    fn keys_host(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .keys
            .as_tensor()
            .detach()
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?)
    }

    /// Cosine similarity of `query` against every key, in pool order.
    pub fn key_similarities(&self, query: &[f32]) -> Result<Vec<f32>> {
        if query.len() != self.dim {
            return Err(Error::shape(format!(
                "query length {} != pool dim {}",
                query.len(),
                self.dim
            )));
        }
        Ok(self
            .keys_host()?
            .iter()
            .map(|key| cosine_similarity(key, query))
            .collect())
    }

    /// Pool indices of the `k` best-matching keys, descending similarity.
    pub fn select_topk(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        topk_indices(&self.key_similarities(query)?, k)
    }

    /// Gathers the sub-prompts at `indices` into one `[len * L_s, D]` block.
    pub fn gather_tokens(&self, indices: &[usize]) -> Result<Tensor> {
        for &i in indices {
            if i >= self.n {
                return Err(Error::SelectionRange(format!(
                    "pool index {i} out of range 0..{}",
                    self.n
                )));
            }
        }
        let iv = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.prompts.device(),
        )?;
        let picked = self.prompts.as_tensor().index_select(&iv, 0)?;
        Ok(picked.reshape((indices.len() * self.tokens, self.dim))?)
    }

    /// Full construction for a single latent `[H, W, D]`: mean-pool query,
    /// top-k key match, token concatenation. The query reads the latent
    /// detached; gradients flow only into the gathered tokens.
    pub fn build_weather_prompt(&self, f_e: &Tensor, k: usize) -> Result<WeatherPrompt> {
        let q = mean_pool_query(f_e)?;
        if q.dims() != [self.dim] {
            return Err(Error::shape(format!(
                "expected a single [H,W,{}] latent, got {:?}",
                self.dim,
                f_e.dims()
            )));
        }
        let qv: Vec<f32> = q.detach().to_dtype(DType::F32)?.to_vec1()?;
        let selected_indices = self.select_topk(&qv, k)?;
        let tokens = self.gather_tokens(&selected_indices)?;
        Ok(WeatherPrompt { tokens, selected_indices })
    }

    /// Batch construction: `[B, H, W, D]` latent to `[B, k * L_s, D]` tokens
    /// plus each item's selection.
    pub fn build_weather_prompt_batch(
        &self,
        f_e: &Tensor,
        k: usize,
    ) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let &[b, _, _, _] = f_e.dims() else {
            return Err(Error::shape(format!("expected [B,H,W,D], got {:?}", f_e.dims())));
        };
        let mut stacked = Vec::with_capacity(b);
        let mut selections = Vec::with_capacity(b);
        for i in 0..b {
            let wp = self.build_weather_prompt(&f_e.narrow(0, i, 1)?.squeeze(0)?, k)?;
            stacked.push(wp.tokens);
            selections.push(wp.selected_indices);
        }
        Ok((Tensor::stack(&stacked, 0)?, selections))
    }
}

/// Per-weather-type selection counts across a run.
#[derive(Debug, Clone)]
pub struct SelectionRecord {
    pool_size: usize,
    counts: BTreeMap<WeatherLabel, Vec<u64>>,
    queries: BTreeMap<WeatherLabel, u64>,
}

impl SelectionRecord {
    pub fn new(pool_size: usize) -> Self {
        Self { pool_size, counts: BTreeMap::new(), queries: BTreeMap::new() }
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// Adds one query's selection under `label`. New labels create entries.
    pub fn record_selection(&mut self, label: WeatherLabel, indices: &[usize]) -> Result<()> {
        for &i in indices {
            if i >= self.pool_size {
                return Err(Error::SelectionRange(format!(
                    "pool index {i} out of range 0..{}",
                    self.pool_size
                )));
            }
        }
        let row = self
            .counts
            .entry(label)
            .or_insert_with(|| vec![0; self.pool_size]);
        for &i in indices {
            row[i] += 1;
        }
        *self.queries.entry(label).or_insert(0) += 1;
        Ok(())
    }

    pub fn labels(&self) -> Vec<WeatherLabel> {
        self.counts.keys().copied().collect()
    }

    pub fn counts(&self, label: WeatherLabel) -> Option<&[u64]> {
        self.counts.get(&label).map(|v| v.as_slice())
    }

    pub fn total_queries(&self, label: WeatherLabel) -> u64 {
        self.queries.get(&label).copied().unwrap_or(0)
    }

    /// Counts for `label` normalized to sum 1; `None` when the label has no
    /// recorded selections.
    pub fn normalized(&self, label: WeatherLabel) -> Option<Vec<f64>> {
        let row = self.counts.get(&label)?;
        let total: u64 = row.iter().sum();
        if total == 0 {
            return None;
        }
        Some(row.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// CSV table, header `label,pool_index,count`, all pool indices listed
    /// for every recorded label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,pool_index,count\n");
        for (label, row) in &self.counts {
            for (i, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{i},{c}", label.as_str());
            }
        }
        out
    }
}

/// Sum of absolute differences between two histograms of equal length.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "histogram lengths differ");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
