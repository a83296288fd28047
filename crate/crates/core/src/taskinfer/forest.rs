//! From-scratch binary random forest: CART trees on bootstrap samples with
//! gini splits and sqrt(d) feature subsampling. Probabilities are the
//! fraction of tree votes, and everything is deterministic under the seed.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 2,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest needs >= 1 tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// CART impurity 1 - sum(p_c^2) over class counts.
pub fn gini(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("gini of an empty node".into()));
    }
    let n = total as f64;
    let sum_sq: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p
        })
        .sum();
    Ok(1.0 - sum_sq)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Node indices; samples with value <= threshold go left.
        left: usize,
        right: usize,
    },
    Leaf {
        /// [P(class 0), P(class 1)] from training counts at this node.
        probs: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn leaf_probs(&self, x: &[f64]) -> [f64; 2] {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { probs } => return *probs,
                TreeNode::Split { feature, threshold, left, right } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Hard vote; equal leaf probabilities vote for the lower class.
    pub fn vote(&self, x: &[f64]) -> usize {
        let p = self.leaf_probs(x);
        usize::from(p[1] > p[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
    pub config: ForestConfig,
}

impl RandomForest {
    /// [1 - v, v] where v is the fraction of trees voting class 1.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.n_features {
            return Err(Error::dim(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let ones: usize = self.trees.iter().map(|t| t.vote(x)).sum();
        let v = ones as f64 / self.trees.len() as f64;
        Ok([1.0 - v, v])
    }

    /// How often each feature index appears as a split across all trees;
    /// the explanation surface for chain stages.
    pub fn split_usage(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_features];
        for tree in &self.trees {
            for node in &tree.nodes {
                if let TreeNode::Split { feature, .. } = node {
                    counts[*feature] += 1;
                }
            }
        }
        counts
    }
}

/// Fit a binary forest. Single-class data degenerates to a constant
/// predictor (single leaf per tree) with a logged warning instead of an
/// error; the classifier chain relies on this for its final stage.
pub fn fit_forest(x: &[Vec<f64>], y: &[usize], cfg: &ForestConfig) -> Result<RandomForest> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "{} rows vs {} labels",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Input("fit_forest needs at least 2 rows".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::dim("rows must share a positive feature count"));
    }
    if let Some(bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("labels must be binary, got {bad}")));
    }
    if y.iter().all(|&l| l == y[0]) {
        log::warn!(
            "fit_forest: single-class data (all labels {}), returning constant predictor",
            y[0]
        );
    }

    let n = x.len();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut tree_rng = rng::rng_from(cfg.seed, rng::tagged(rng::stream::FOREST, &[t as u64]));
        let sample: Vec<usize> = (0..n).map(|_| tree_rng.random_range(0..n)).collect();
        let mut builder = TreeBuilder {
            x,
            y,
            cfg,
            nodes: Vec::new(),
            features_per_split: isqrt_floor(d).max(1),
            d,
        };
        builder.grow(sample, 0, &mut tree_rng);
        trees.push(DecisionTree { nodes: builder.nodes });
    }
    Ok(RandomForest {
        trees,
        n_features: d,
        config: *cfg,
    })
}

fn isqrt_floor(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while r * r > n {
        r -= 1;
    }
    r
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    cfg: &'a ForestConfig,
    nodes: Vec<TreeNode>,
    features_per_split: usize,
    d: usize,
}

impl TreeBuilder<'_> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut c = [0usize; 2];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn leaf(&mut self, counts: [usize; 2]) -> usize {
        let n = (counts[0] + counts[1]) as f64;
        self.nodes.push(TreeNode::Leaf {
            probs: [counts[0] as f64 / n, counts[1] as f64 / n],
        });
        self.nodes.len() - 1
    }

    /// Grow a subtree over `idx`; returns its node index.
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha20Rng) -> usize {
        let counts = self.counts(&idx);
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_samples_leaf {
            return self.leaf(counts);
        }

        let parent_gini = gini(&counts).expect("non-empty node");
        let features = self.sample_features(rng);
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)

        for &f in &features {
            // Sweep sorted values, moving samples left one threshold at a time.
            let mut vals: Vec<(f64, usize)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let n = vals.len();
            let mut left = [0usize; 2];
            let mut right = counts;
            for cut in 1..n {
                let (v_prev, label) = vals[cut - 1];
                left[label] += 1;
                right[label] -= 1;
                let v_next = vals[cut].0;
                if v_prev == v_next {
                    continue;
                }
                if cut < self.cfg.min_samples_leaf || n - cut < self.cfg.min_samples_leaf {
                    continue;
                }
                let weighted = (cut as f64 * gini(&left).unwrap()
                    + (n - cut) as f64 * gini(&right).unwrap())
                    / n as f64;
                let gain = parent_gini - weighted;
                // Strict improvement keeps the first (feature order, then
                // ascending threshold) candidate on ties, for determinism.
                if gain > best.map_or(0.0, |(g, _, _)| g) {
                    best = Some((gain, f, (v_prev + v_next) / 2.0));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(counts);
        };
        let (li, ri): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);

        let node = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(li, depth + 1, rng);
        let right = self.grow(ri, depth + 1, rng);
        if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[node] {
            *l = left;
            *r = right;
        }
        node
    }

    /// Distinct feature indices via partial Fisher-Yates, in draw order.
    fn sample_features(&self, rng: &mut ChaCha20Rng) -> Vec<usize> {
        let m = self.features_per_split.min(self.d);
        let mut pool: Vec<usize> = (0..self.d).collect();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let j = rng.random_range(i..self.d);
            pool.swap(i, j);
            out.push(pool[i]);
        }
        out
    }
}
