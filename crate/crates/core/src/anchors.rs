//! Epoch-frozen source class means and total means for every manifold layer.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ManifoldNetwork;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnchors {
    /// `d_l x c`, column `i` is the mean feature of class `i`.
    pub class_means: Matrix,
    /// Sample-weighted mean over all source samples of the pass.
    pub total_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStore {
    pub layers: Vec<LayerAnchors>,
    pub epoch_tag: usize,
}

/// One untaped pass over the source set in dataset order, `batch_size`
/// samples at a time. `max_samples` caps the pass to a dataset prefix.
pub fn compute_anchors(
    net: &ManifoldNetwork,
    source: &Dataset,
    batch_size: usize,
    max_samples: Option<usize>,
    epoch_tag: usize,
) -> Result<AnchorStore> {
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("anchors need a labelled source dataset".into()))?;
    let c = source.class_count;
    let n = max_samples.map_or(source.len(), |m| m.min(source.len()));
    let mut counts = vec![0usize; c];
    labels[..n].iter().for_each(|&y| counts[y] += 1);
    if let Some(class) = counts.iter().position(|&k| k == 0) {
        return Err(Error::MissingClass {
            class,
            context: "anchor pass".into(),
        });
    }

    let dims = net.dims();
    let layer_dims = &dims[1..dims.len() - 1];
    let mut sums: Vec<Matrix> = layer_dims.iter().map(|&d| Matrix::zeros(d, c)).collect();
    let step = batch_size.max(1);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(step) {
        let x = source.features.select_columns(chunk)?;
        let pass = net.forward(&x)?;
        for (sum, h) in sums.iter_mut().zip(&pass.h) {
            for (col, &j) in chunk.iter().enumerate() {
                let y = labels[j];
                let src = h.col(col).to_vec();
                sum.col_mut(y).iter_mut().zip(&src).for_each(|(a, b)| *a += b);
            }
        }
    }

    let layers = sums
        .into_iter()
        .map(|sum| {
            let total_mean = (0..sum.rows())
                .map(|i| (0..c).map(|k| sum[(i, k)]).sum::<f64>() / n as f64)
                .collect();
            let class_means = Matrix::from_fn(sum.rows(), c, |i, k| sum[(i, k)] / counts[k] as f64);
            LayerAnchors {
                class_means,
                total_mean,
            }
        })
        .collect();
    Ok(AnchorStore { layers, epoch_tag })
}

impl AnchorStore {
    /// Recomputes the anchors from the current network for `epoch`.
    pub fn refresh(
        &self,
        net: &ManifoldNetwork,
        source: &Dataset,
        batch_size: usize,
        max_samples: Option<usize>,
        epoch: usize,
    ) -> Result<AnchorStore> {
        if epoch <= self.epoch_tag {
            return Err(Error::Usage(format!(
                "anchor refresh for epoch {epoch} after epoch {}",
                self.epoch_tag
            )));
        }
        compute_anchors(net, source, batch_size, max_samples, epoch)
    }

    /// Long-format CSV: `layer,class,dim,value`, class `total` for the
    /// total mean. Layers are numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,class,dim,value\n");
        for (l, layer) in self.layers.iter().enumerate() {
            let m = &layer.class_means;
            for k in 0..m.cols() {
                for (i, v) in m.col(k).iter().enumerate() {
                    out.push_str(&format!("{},{},{},{}\n", l + 1, k, i, crate::fmt_f64(*v)));
                }
            }
            for (i, v) in layer.total_mean.iter().enumerate() {
                out.push_str(&format!("{},total,{},{}\n", l + 1, i, crate::fmt_f64(*v)));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_file(path, self.to_csv().as_bytes())
    }
}
