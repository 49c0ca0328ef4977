//! Histogram-based regression trees shared by the forest and boosting learners.
//!
//! Trees are grown on first/second order statistics `(g, h)` per row: a leaf
//! predicts `sum(g) / sum(h)` and a split maximizes the usual
//! `G_L^2/H_L + G_R^2/H_R - G^2/H` gain. With `g = w*y, h = w` this is a weighted
//! least-squares tree; boosting supplies gradients and hessians instead.

use nalgebra::DMatrix;

use crate::rng::RngStream;

pub(crate) const MAX_BINS: usize = 64;

/// Features discretized into at most [`MAX_BINS`] ordered bins. A value falls in
/// bin `b` iff it is `<= thresholds[b]` and above `thresholds[b - 1]`.
#[derive(Debug, Clone)]
pub(crate) struct Binned {
    bins: Vec<Vec<u8>>,
    thresholds: Vec<Vec<f64>>,
}

impl Binned {
    pub fn new(x: &DMatrix<f64>) -> Binned {
        let mut bins = Vec::with_capacity(x.ncols());
        let mut thresholds = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let values: Vec<f64> = col.iter().copied().collect();
            let thr = cut_points(&values);
            let b = values
                .iter()
                .map(|v| thr.partition_point(|t| t < v) as u8)
                .collect();
            bins.push(b);
            thresholds.push(thr);
        }
        Binned { bins, thresholds }
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }
}

/// Midpoints between distinct values; when there are too many distinct values the
/// cuts are placed near equal-count quantiles.
fn cut_points(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &v in &sorted {
        if uniq.last() == Some(&v) {
            *counts.last_mut().unwrap() += 1;
        } else {
            uniq.push(v);
            counts.push(1);
        }
    }
    let mid = |i: usize| uniq[i] + (uniq[i + 1] - uniq[i]) / 2.0;
    if uniq.len() <= MAX_BINS {
        return (0..uniq.len().saturating_sub(1)).map(mid).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(MAX_BINS - 1);
    let mut cum = 0usize;
    let mut next = 1usize;
    for (i, &c) in counts.iter().enumerate().take(uniq.len() - 1) {
        cum += c;
        if cum * MAX_BINS >= next * n {
            cuts.push(mid(i));
            while next * n <= cum * MAX_BINS {
                next += 1;
            }
            if cuts.len() == MAX_BINS - 1 {
                break;
            }
        }
    }
    cuts
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[(i, *feature)] <= *threshold { *left } else { *right },
            }
        }
    }

    #[cfg(test)]
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: f64,
    /// Features examined per split; all features when `>= n_features`.
    pub mtry: usize,
}

/// Per-row statistics. `count` is the row multiplicity used by `min_leaf`.
pub(crate) struct RowStats<'a> {
    pub g: &'a [f64],
    pub h: &'a [f64],
    pub count: &'a [f64],
}

struct Pending {
    node: usize,
    rows: Vec<usize>,
    depth: usize,
}

fn leaf_value(g: f64, h: f64) -> f64 {
    if h > 0.0 {
        g / h
    } else {
        0.0
    }
}

pub(crate) fn grow(
    binned: &Binned,
    stats: &RowStats<'_>,
    rows: Vec<usize>,
    params: TreeParams,
    mut rng: Option<&mut RngStream>,
) -> Tree {
    let p = binned.n_features();
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut stack = vec![Pending {
        node: 0,
        rows,
        depth: 0,
    }];
    let mut features: Vec<usize> = (0..p).collect();
    let mut hist = vec![[0.0f64; 3]; MAX_BINS];
    while let Some(Pending { node, rows, depth }) = stack.pop() {
        let (mut gs, mut hs, mut cs) = (0.0, 0.0, 0.0);
        for &i in &rows {
            gs += stats.g[i];
            hs += stats.h[i];
            cs += stats.count[i];
        }
        nodes[node] = Node::Leaf(leaf_value(gs, hs));
        if rows.is_empty() || params.max_depth.is_some_and(|d| depth >= d) || cs < 2.0 * params.min_leaf {
            continue;
        }
        let candidates: &[usize] = if params.mtry >= p {
            &features
        } else {
            let rng = rng.as_deref_mut().expect("feature subsampling needs a random stream");
            for k in 0..params.mtry {
                let j = k + rng.index(p - k);
                features.swap(k, j);
            }
            features[..params.mtry].sort_unstable();
            &features[..params.mtry]
        };
        let parent = if hs > 0.0 { gs * gs / hs } else { 0.0 };
        let tol = 1e-12 * (1.0 + parent.abs());
        let mut best: Option<(f64, usize, usize)> = None;
        for &f in candidates {
            if binned.thresholds[f].is_empty() {
                continue;
            }
            let col = &binned.bins[f];
            let (mut lo, mut hi) = (u8::MAX, 0u8);
            for &i in &rows {
                let bin = col[i];
                lo = lo.min(bin);
                hi = hi.max(bin);
                let slot = &mut hist[bin as usize];
                slot[0] += stats.g[i];
                slot[1] += stats.h[i];
                slot[2] += stats.count[i];
            }
            let (lo, hi) = (lo as usize, hi as usize);
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0.0);
            // only bins the node's rows fall into can hold a split point
            for b in lo..hi {
                let slot = hist[b];
                gl += slot[0];
                hl += slot[1];
                cl += slot[2];
                let (gr, hr, cr) = (gs - gl, hs - hl, cs - cl);
                if cl < params.min_leaf || cr < params.min_leaf || hl <= 0.0 || hr <= 0.0 {
                    continue;
                }
                let gain = gl * gl / hl + gr * gr / hr - parent;
                if gain > tol && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, b));
                }
            }
            for slot in &mut hist[lo..=hi] {
                *slot = [0.0; 3];
            }
        }
        let Some((_, f, b)) = best else { continue };
        let col = &binned.bins[f];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| col[i] as usize <= b);
        let left = nodes.len();
        nodes.push(Node::Leaf(0.0));
        nodes.push(Node::Leaf(0.0));
        nodes[node] = Node::Split {
            feature: f,
            threshold: binned.thresholds[f][b],
            left,
            right: left + 1,
        };
        stack.push(Pending {
            node: left + 1,
            rows: right_rows,
            depth: depth + 1,
        });
        stack.push(Pending {
            node: left,
            rows: left_rows,
            depth: depth + 1,
        });
    }
    Tree { nodes }
}

/// Row permutation sorting records lexicographically by (features, target), so fits
/// do not depend on the order records arrive in.
pub(crate) fn canonical_order(x: &DMatrix<f64>, y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| {
        for j in 0..x.ncols() {
            let o = x[(a, j)].total_cmp(&x[(b, j)]);
            if o.is_ne() {
                return o;
            }
        }
        y[a].total_cmp(&y[b])
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit_plain(x: &DMatrix<f64>, y: &[f64], params: TreeParams) -> Tree {
        let n = y.len();
        let ones = vec![1.0; n];
        let binned = Binned::new(x);
        let stats = RowStats {
            g: y,
            h: &ones,
            count: &ones,
        };
        grow(&binned, &stats, (0..n).collect(), params, None)
    }

    #[test]
    fn depth_zero_predicts_mean() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = [1.0, 2.0, 3.0, 10.0];
        let t = fit_plain(
            &x,
            &y,
            TreeParams {
                max_depth: Some(0),
                min_leaf: 1.0,
                mtry: 1,
            },
        );
        assert_eq!(t.n_leaves(), 1);
        assert_eq!(t.predict(&x, 0), 4.0);
    }

    #[test]
    fn step_function_recovered() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|&v| if v < 7.0 { -1.0 } else { 2.0 }).collect();
        let x = DMatrix::from_column_slice(20, 1, &xs);
        let t = fit_plain(
            &x,
            &y,
            TreeParams {
                max_depth: None,
                min_leaf: 1.0,
                mtry: 1,
            },
        );
        assert_eq!(t.n_leaves(), 2);
        for i in 0..20 {
            assert_eq!(t.predict(&x, i), y[i]);
        }
        // threshold sits midway between 6 and 7
        let probe = DMatrix::from_column_slice(2, 1, &[6.49, 6.51]);
        assert_eq!(t.predict(&probe, 0), -1.0);
        assert_eq!(t.predict(&probe, 1), 2.0);
    }

    #[test]
    fn many_values_capped_at_max_bins() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let cuts = cut_points(&v);
        assert!(cuts.len() < MAX_BINS);
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
        assert!(cuts.len() > 50);
    }

    #[test]
    fn min_leaf_respected() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let x = DMatrix::from_column_slice(10, 1, &xs);
        let t = fit_plain(
            &x,
            &y,
            TreeParams {
                max_depth: None,
                min_leaf: 5.0,
                mtry: 1,
            },
        );
        assert_eq!(t.n_leaves(), 2);
    }
}
