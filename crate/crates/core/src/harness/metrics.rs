use alloc::vec::Vec;

use super::data::{salient_mask, Dataset};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{Real, Tensor};

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, &[]);
        let (logits, _) = model.predict(&x)?;
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / libm::sqrt(saa * sbb)
}

/// Fraction of salient pixels under each cell of an `gh x gw` grid.
pub fn mask_coverage(mask: &[bool], h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let (ch, cw) = (h / gh, w / gw);
    let mut out = alloc::vec![0.0; gh * gw];
    for y in 0..gh * ch {
        for x in 0..gw * cw {
            if mask[y * w + x] {
                out[(y / ch) * gw + x / cw] += 1.0;
            }
        }
    }
    let area = (ch * cw) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Mean Pearson correlation between the stage-1 significance map and the
/// salient-patch coverage of each listed image.
pub fn significance_correlation<T: Real>(model: &Model<T>, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let (h, w, _) = data.image_shape();
    let mut total = 0.0;
    for chunk in indices.chunks(16) {
        let (x, _) = data.batch::<T>(chunk, &[]);
        let (_, maps) = model.predict(&x)?;
        let map: &Tensor<T> = &maps[0];
        let (gh, gw) = (map.shape()[1], map.shape()[2]);
        for (k, &i) in chunk.iter().enumerate() {
            let s: Vec<f64> = map.data()[k * gh * gw..(k + 1) * gh * gw].iter().map(|v| v.to_f64()).collect();
            let cover = mask_coverage(&salient_mask(data, i), h, w, gh, gw);
            total += pearson(&s, &cover);
        }
    }
    Ok(total / indices.len().max(1) as f64)
}
