//! Geometric-median filter pruning of convolutional extractors.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Extractor;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Redundancy score of each row of a `[K, …]` filter bank: the sum of its
/// distances to every other filter. Low scores sit near the geometric median.
pub fn filter_scores(filters: &Tensor) -> Result<Vec<f64>> {
    let k = filters.shape().first().copied().unwrap_or(0);
    if k < 2 {
        return Err(Error::arg("filter_scores needs at least two filters"));
    }
    let n = filters.len() / k;
    let rows: Vec<&[f64]> = filters.data().chunks(n).collect();
    let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
    Ok((0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| dist(rows[i], rows[j])).sum())
        .collect())
}

/// Filter indices ordered from most to least redundant (ties by index).
pub fn redundancy_order(filters: &Tensor) -> Result<Vec<usize>> {
    let s = filter_scores(filters)?;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub layers: Vec<LayerPlan>,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.removed.is_empty())
    }
}

/// Learnable parameters of a conv/BN stack with the given widths.
fn stack_params(in_channels: usize, widths: &[usize]) -> usize {
    let mut cin = in_channels;
    widths
        .iter()
        .map(|&w| {
            let p = 9 * cin * w + 2 * w;
            cin = w;
            p
        })
        .sum()
}

fn removal(in_channels: usize, full: &[usize], kept: &[usize]) -> f64 {
    1.0 - stack_params(in_channels, kept) as f64 / stack_params(in_channels, full) as f64
}

/// Kept widths whose removal rate is as close to `target` as a uniform fraction
/// plus single-filter adjustments (largest layers first) can get.
fn plan_widths(in_channels: usize, full: &[usize], target: f64) -> Vec<usize> {
    let kept_at = |f: f64| -> Vec<usize> {
        full.iter()
            .map(|&w| (libm::round(w as f64 * (1.0 - f)) as usize).clamp(1, w))
            .collect()
    };
    let err = |k: &[usize]| libm::fabs(removal(in_channels, full, k) - target);
    let mut best = kept_at(0.0);
    for step in 0..=1000 {
        let cand = kept_at(step as f64 / 1000.0);
        if err(&cand) < err(&best) {
            best = cand;
        }
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.sort_by(|&a, &b| full[b].cmp(&full[a]).then(a.cmp(&b)));
    while err(&best) > 0.02 {
        let mut improved = false;
        for &l in &order {
            for delta in [1isize, -1] {
                let w = best[l] as isize + delta;
                if w < 1 || w > full[l] as isize {
                    continue;
                }
                let mut cand = best.clone();
                cand[l] = w as usize;
                if err(&cand) < err(&best) {
                    best = cand;
                    improved = true;
                    break;
                }
            }
            if improved {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    best
}

fn validate_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::arg(format!("target rate {rate} outside (0, 1)")));
    }
    Ok(())
}

fn make_plan(extractor: &Extractor, store: &ParamStore, target: f64, removed: Vec<Vec<usize>>) -> PruningPlan {
    let full = extractor.widths(store);
    let cin = extractor.spec.in_channels;
    let kept: Vec<usize> = full.iter().zip(&removed).map(|(w, r)| w - r.len()).collect();
    PruningPlan {
        target_rate: target,
        achieved_rate: removal(cin, &full, &kept),
        params_before: stack_params(cin, &full),
        params_after: stack_params(cin, &kept),
        layers: extractor
            .blocks
            .iter()
            .zip(removed)
            .map(|(b, mut r)| {
                r.sort_unstable();
                LayerPlan {
                    name: String::from(store.name(b.conv)),
                    removed: r,
                }
            })
            .collect(),
    }
}

/// Plans removal of the most redundant filters in every layer so that about
/// `target_rate` of the extractor's learnable parameters disappear.
pub fn build_plan(extractor: &Extractor, store: &ParamStore, target_rate: f64) -> Result<PruningPlan> {
    validate_rate(target_rate)?;
    let full = extractor.widths(store);
    let kept = plan_widths(extractor.spec.in_channels, &full, target_rate);
    let mut removed = Vec::new();
    for (b, (&w, &k)) in extractor.blocks.iter().zip(full.iter().zip(&kept)) {
        if w == k {
            removed.push(Vec::new());
            continue;
        }
        let order = redundancy_order(store.get(b.conv))?;
        removed.push(order[..w - k].to_vec());
    }
    Ok(make_plan(extractor, store, target_rate, removed))
}

/// Alternative plan: within each layer, for every pair of filters whose cosine
/// similarity exceeds `threshold`, the later filter is dropped.
pub fn build_threshold_plan(extractor: &Extractor, store: &ParamStore, threshold: f64) -> Result<PruningPlan> {
    let mut removed = Vec::new();
    for b in &extractor.blocks {
        let w = store.get(b.conv);
        let k = w.shape()[0];
        let n = w.len() / k;
        let rows: Vec<&[f64]> = w.data().chunks(n).collect();
        let norm = |r: &[f64]| libm::sqrt(r.iter().map(|v| v * v).sum());
        let mut gone = BTreeSet::new();
        for i in 0..k {
            if gone.contains(&i) {
                continue;
            }
            for j in i + 1..k {
                if gone.len() + 1 >= k || gone.contains(&j) {
                    continue;
                }
                let (ni, nj) = (norm(rows[i]), norm(rows[j]));
                let cos = if ni == 0.0 || nj == 0.0 {
                    if ni == nj { 1.0 } else { 0.0 }
                } else {
                    rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum::<f64>() / (ni * nj)
                };
                if cos > threshold {
                    gone.insert(j);
                }
            }
        }
        removed.push(gone.into_iter().collect());
    }
    let plan = make_plan(extractor, store, 0.0, removed);
    Ok(PruningPlan {
        target_rate: plan.achieved_rate,
        ..plan
    })
}

fn keep_list(width: usize, removed: &[usize]) -> Vec<usize> {
    (0..width).filter(|i| !removed.contains(i)).collect()
}

fn select_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(&new_shape, data).expect("sized")
}

/// Removes the planned filters, their normalization entries and the matching
/// input channels of the following layer. Returns the kept output channels of
/// the last layer so downstream classifier columns can follow.
pub fn apply_plan(extractor: &Extractor, store: &mut ParamStore, plan: &PruningPlan) -> Result<Vec<usize>> {
    if plan.layers.len() != extractor.blocks.len() {
        return Err(Error::InconsistentPlan(format!(
            "{} layers planned for {} blocks",
            plan.layers.len(),
            extractor.blocks.len()
        )));
    }
    let widths = extractor.widths(store);
    for ((layer, b), &w) in plan.layers.iter().zip(&extractor.blocks).zip(&widths) {
        if layer.name != store.name(b.conv) {
            return Err(Error::InconsistentPlan(format!("layer {} does not match {}", layer.name, store.name(b.conv))));
        }
        let distinct: BTreeSet<_> = layer.removed.iter().collect();
        if distinct.len() != layer.removed.len() || layer.removed.iter().any(|&i| i >= w) || layer.removed.len() >= w {
            return Err(Error::InconsistentPlan(format!("invalid removal list for {}", layer.name)));
        }
    }
    let mut last_keep = Vec::new();
    for (i, (layer, b)) in plan.layers.iter().zip(&extractor.blocks).enumerate() {
        let keep = keep_list(widths[i], &layer.removed);
        let conv = select_axis(store.get(b.conv), 0, &keep);
        store.set(b.conv, conv);
        for id in [b.gamma, b.beta, b.running_mean, b.running_var] {
            let t = select_axis(store.get(id), 0, &keep);
            store.set(id, t);
        }
        if let Some(next) = extractor.blocks.get(i + 1) {
            let t = select_axis(store.get(next.conv), 1, &keep);
            store.set(next.conv, t);
        }
        last_keep = keep;
    }
    Ok(last_keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;
    use crate::rng::rng_for;
    use alloc::vec;
    use rand::Rng as _;

    #[test]
    fn hand_scores() {
        let f = Tensor::new(&[3, 1], vec![0.0, 1.0, 10.0]).unwrap();
        assert_eq!(filter_scores(&f).unwrap(), vec![11.0, 10.0, 19.0]);
        let same = Tensor::full(&[4, 3], 2.0);
        assert!(filter_scores(&same).unwrap().iter().all(|&s| s == 0.0));
        assert!(filter_scores(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn duplicated_filters_rank_first() {
        let f = Tensor::new(&[3, 2], vec![5.0, -1.0, 0.3, 0.2, 0.3, 0.2]).unwrap();
        let order = redundancy_order(&f).unwrap();
        assert_eq!(&order[..2], &[1, 2]);
    }

    #[test]
    fn rate_targets_on_desk_backbone() {
        let mut store = ParamStore::new();
        let e = Extractor::new(&mut store, "ts0", &BackboneSpec::desk(), &mut rng_for(1, &[])).unwrap();
        for &rate in &[0.2, 0.4, 0.6] {
            let plan = build_plan(&e, &store, rate).unwrap();
            assert!((plan.achieved_rate - rate).abs() <= 0.02, "{rate}: {}", plan.achieved_rate);
        }
        assert!(build_plan(&e, &store, 0.0).is_err());
        assert!(build_plan(&e, &store, 1.0).is_err());
    }

    #[test]
    fn tiny_rate_gives_empty_plan() {
        let mut store = ParamStore::new();
        let e = Extractor::new(&mut store, "ts0", &BackboneSpec::desk(), &mut rng_for(1, &[])).unwrap();
        let plan = build_plan(&e, &store, 1e-6).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.achieved_rate, 0.0);
        let before = store.clone_tensors(&e.param_ids());
        apply_plan(&e, &mut store, &plan).unwrap();
        assert!(store.clone_tensors(&e.param_ids()).iter().zip(&before).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn toy_two_layer_half() {
        let mut store = ParamStore::new();
        let spec = BackboneSpec {
            in_channels: 3,
            image_size: 8,
            widths: vec![8, 8],
        };
        let e = Extractor::new(&mut store, "ts0", &spec, &mut rng_for(2, &[])).unwrap();
        let before = e.num_params(&store);
        let plan = build_plan(&e, &store, 0.5).unwrap();
        assert!((plan.achieved_rate - 0.5).abs() <= 0.02);
        apply_plan(&e, &mut store, &plan).unwrap();
        assert_eq!(e.num_params(&store), plan.params_after);
        assert_eq!(before, plan.params_before);
    }

    #[test]
    fn dead_filter_removal_keeps_outputs() {
        let mut store = ParamStore::new();
        let spec = BackboneSpec {
            in_channels: 3,
            image_size: 8,
            widths: vec![4, 5],
        };
        let e = Extractor::new(&mut store, "ts0", &spec, &mut rng_for(3, &[])).unwrap();
        // Filter 2 of block 0 outputs relu(beta) = 0 and block 1 ignores it.
        let b0 = &e.blocks[0];
        store.get_mut(b0.conv).data_mut()[2 * 27..3 * 27].fill(0.0);
        store.get_mut(b0.beta).data_mut()[2] = -1.0;
        let w1 = e.blocks[1].conv;
        for o in 0..5 {
            store.get_mut(w1).data_mut()[(o * 4 + 2) * 9..(o * 4 + 3) * 9].fill(0.0);
        }
        let mut rng = rng_for(4, &[]);
        let x = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.gen());
        let (map_before, pooled_before) = e.forward_features(&store, &x).unwrap();
        let plan = PruningPlan {
            target_rate: 0.0,
            achieved_rate: 0.0,
            params_before: 0,
            params_after: 0,
            layers: vec![
                LayerPlan { name: "ts0.block0.conv.weight".into(), removed: vec![2] },
                LayerPlan { name: "ts0.block1.conv.weight".into(), removed: vec![] },
            ],
        };
        apply_plan(&e, &mut store, &plan).unwrap();
        assert_eq!(e.widths(&store), vec![3, 5]);
        let (map_after, pooled_after) = e.forward_features(&store, &x).unwrap();
        assert!(map_after.max_abs_diff(&map_before) < 1e-12);
        assert!(pooled_after.max_abs_diff(&pooled_before) < 1e-12);
    }

    #[test]
    fn pruned_extractor_stays_consistent_and_rejects_bad_plans() {
        let mut store = ParamStore::new();
        let e = Extractor::new(&mut store, "ts0", &BackboneSpec::desk(), &mut rng_for(1, &[])).unwrap();
        let plan = build_plan(&e, &store, 0.4).unwrap();
        let mut bad = plan.clone();
        bad.layers.pop();
        assert!(matches!(apply_plan(&e, &mut store, &bad), Err(Error::InconsistentPlan(_))));
        let mut bad = plan.clone();
        bad.layers[0].removed.push(10_000);
        assert!(matches!(apply_plan(&e, &mut store, &bad), Err(Error::InconsistentPlan(_))));
        let keep = apply_plan(&e, &mut store, &plan).unwrap();
        assert_eq!(keep.len(), e.output_dim(&store));
        let mut rng = rng_for(4, &[]);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen());
        let (map, pooled) = e.forward_features(&store, &x).unwrap();
        let d = e.output_dim(&store);
        for b in 0..2 {
            for c in 0..d {
                let m: f64 = (0..4).map(|p| map.data()[(b * 4 + p) * d + c]).sum::<f64>() / 4.0;
                assert!((m - pooled.data()[b * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_plan_drops_near_duplicates() {
        let mut store = ParamStore::new();
        let spec = BackboneSpec {
            in_channels: 1,
            image_size: 4,
            widths: vec![3],
        };
        let e = Extractor::new(&mut store, "ts0", &spec, &mut rng_for(1, &[])).unwrap();
        let w = store.get(e.blocks[0].conv).clone();
        let mut d = w.data().to_vec();
        let first: Vec<f64> = d[..9].iter().map(|v| v * 2.0).collect();
        d[18..27].copy_from_slice(&first);
        store.set(e.blocks[0].conv, Tensor::new(w.shape(), d).unwrap());
        let plan = build_threshold_plan(&e, &store, 0.999).unwrap();
        assert_eq!(plan.layers[0].removed, vec![2]);
    }
}
