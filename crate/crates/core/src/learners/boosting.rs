//! Gradient-boosted trees: squared loss for regression, Newton steps on the
//! logistic loss for probabilities.

use nalgebra::DMatrix;

use super::glm::{expit, logit};
use super::tree::{canonical_order, grow, Binned, RowStats, Tree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Boosted {
    init: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
    logistic: bool,
}

impl Boosted {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], params: BoostParams, logistic: bool) -> Boosted {
        let order = canonical_order(x, y);
        let xs = x.select_rows(&order);
        let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let n = ys.len();
        let binned = Binned::new(&xs);
        let tree_params = TreeParams {
            max_depth: Some(params.max_depth),
            min_leaf: params.min_leaf as f64,
            mtry: x.ncols(),
        };
        let mean = ys.iter().sum::<f64>() / n as f64;
        let init = if logistic { logit(mean.clamp(1e-6, 1.0 - 1e-6)) } else { mean };
        let mut score = vec![init; n];
        let ones = vec![1.0; n];
        let mut g = vec![0.0; n];
        let mut h = vec![1.0; n];
        let mut trees = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            for i in 0..n {
                if logistic {
                    let p = expit(score[i]);
                    g[i] = ys[i] - p;
                    h[i] = (p * (1.0 - p)).max(1e-12);
                } else {
                    g[i] = ys[i] - score[i];
                }
            }
            let stats = RowStats {
                g: &g,
                h: &h,
                count: &ones,
            };
            let tree = grow(&binned, &stats, (0..n).collect(), tree_params, None);
            for (i, s) in score.iter_mut().enumerate() {
                *s += params.learning_rate * tree.predict(&xs, i);
            }
            trees.push(tree);
        }
        Boosted {
            init,
            learning_rate: params.learning_rate,
            trees,
            logistic,
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let s = self.init + self.learning_rate * self.trees.iter().map(|t| t.predict(x, i)).sum::<f64>();
                if self.logistic {
                    expit(s)
                } else {
                    s
                }
            })
            .collect()
    }
}
