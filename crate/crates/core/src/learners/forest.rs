//! Random forest of weighted least-squares trees (bootstrap multiplicities act as weights).

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::tree::{canonical_order, grow, Binned, RowStats, Tree, TreeParams};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ForestParams {
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub mtry: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], params: ForestParams, rng: &RngStream) -> Forest {
        let order = canonical_order(x, y);
        let xs = x.select_rows(&order);
        let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let n = ys.len();
        let binned = Binned::new(&xs);
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf as f64,
            mtry: params.mtry.clamp(1, x.ncols()),
        };
        let trees = (0..params.trees)
            .into_par_iter()
            .map(|t| {
                let mut stream = rng.substream(t as u64);
                let mut weight = vec![0.0; n];
                if params.bootstrap {
                    for _ in 0..n {
                        weight[stream.index(n)] += 1.0;
                    }
                } else {
                    weight.fill(1.0);
                }
                let rows: Vec<usize> = (0..n).filter(|&i| weight[i] > 0.0).collect();
                let g: Vec<f64> = (0..n).map(|i| weight[i] * ys[i]).collect();
                let stats = RowStats {
                    g: &g,
                    h: &weight,
                    count: &weight,
                };
                grow(&binned, &stats, rows, tree_params, Some(&mut stream))
            })
            .collect();
        Forest { trees }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let m = self.trees.len() as f64;
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict(x, i)).sum::<f64>() / m)
            .collect()
    }
}
