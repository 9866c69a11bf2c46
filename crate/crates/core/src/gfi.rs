//! Gradient-ranked filter insertion.
//!
//! Positions in a conv layer with `d` filters are numbered `0..=d`;
//! position `j < d` sits just before original filter `j` and position `d`
//! follows the last filter.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{loss_and_gradients, LossSpec, OutputLoss};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{ConvSpec, LayerSpec, ModelGraph};
use crate::surgery::{insert_filters, OriginFlags};

/// Accumulated absolute gradients of each conv layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    layers: BTreeMap<usize, (ConvSpec, Vec<f64>)>,
}

impl ImportanceMap {
    pub fn from_parts(layers: BTreeMap<usize, (ConvSpec, Vec<f64>)>) -> Result<Self> {
        for (l, (spec, acc)) in &layers {
            if acc.len() != spec.weight_len() {
                return Err(invalid(format!("layer {l}: {} entries for {}", acc.len(), spec.weight_len())));
            }
        }
        Ok(Self { layers })
    }

    pub fn layer(&self, l: usize) -> Option<&[f64]> {
        self.layers.get(&l).map(|(_, a)| a.as_slice())
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }
}

/// Sums `|dL/dθ|` over the dataset one sample at a time, in dataset order.
pub fn accumulate_abs_gradients(model: &ModelGraph, data: &LabeledDataset) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(invalid("importance scoring needs at least one sample"));
    }
    let ranges = model.param_ranges();
    let convs = model.conv_layers();
    let mut acc: BTreeMap<usize, (ConvSpec, Vec<f64>)> = convs
        .iter()
        .map(|&l| {
            let spec = model.conv_spec(l).unwrap();
            (l, (spec, vec![0.0; spec.weight_len()]))
        })
        .collect();
    for i in 0..data.len() {
        let (x, y) = data.batch(&[i])?;
        let spec = LossSpec::new(OutputLoss::Task(data.loss(), y.as_target()));
        let (_, grads) = loss_and_gradients(model, &x, &spec)?;
        for &l in &convs {
            let w = ranges[l].as_ref().unwrap().weights.clone();
            let slot = &mut acc.get_mut(&l).unwrap().1;
            for (a, g) in slot.iter_mut().zip(&grads[w]) {
                *a += g.abs();
            }
        }
    }
    Ok(ImportanceMap { layers: acc })
}

/// Per-filter mean of the accumulated magnitudes over its `c·s·s` weights.
pub fn filter_importance(map: &ImportanceMap) -> BTreeMap<usize, Vec<f64>> {
    map.layers
        .iter()
        .map(|(&l, (spec, acc))| {
            let n = spec.filter_len();
            (l, acc.chunks(n).map(|f| f.iter().sum::<f64>() / n as f64).collect())
        })
        .collect()
}

/// Importance of each of the `d + 1` positions from its neighbouring filters.
pub fn position_importance(w: &[f64]) -> Result<Vec<f64>> {
    let d = w.len();
    if d == 0 {
        return Err(Error::Internal("conv layer without filters".into()));
    }
    Ok((0..=d)
        .map(|j| match j {
            0 => w[0],
            j if j == d => w[d - 1],
            j => (w[j - 1] + w[j]) / 2.0,
        })
        .collect())
}

/// Chosen insertion positions, in selection order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InsertionPlan {
    positions: Vec<(usize, usize)>,
}

impl InsertionPlan {
    pub fn new(positions: Vec<(usize, usize)>) -> Self {
        Self { positions }
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn by_layer(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(l, j) in &self.positions {
            out.entry(l).or_default().push(j);
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }
}

/// The `n` highest-scoring positions. Ties go to the lower layer index,
/// then the lower position index.
pub fn select_positions(scores: &BTreeMap<usize, Vec<f64>>, n: usize) -> Result<InsertionPlan> {
    let mut all: Vec<(f64, usize, usize)> = scores
        .iter()
        .flat_map(|(&l, ps)| ps.iter().enumerate().map(move |(j, &p)| (p, l, j)))
        .collect();
    if n > all.len() {
        return Err(invalid(format!("budget {n} exceeds {} available positions", all.len())));
    }
    if all.iter().any(|(p, ..)| p.is_nan()) {
        return Err(Error::NonFinite("position importance is NaN".into()));
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(InsertionPlan::new(all.into_iter().take(n).map(|(_, l, j)| (l, j)).collect()))
}

/// Position scores for every insertable layer of `model`.
pub fn position_scores(model: &ModelGraph, map: &ImportanceMap) -> Result<BTreeMap<usize, Vec<f64>>> {
    let w = filter_importance(map);
    model
        .insertable_layers()
        .into_iter()
        .map(|l| {
            let wl = w.get(&l).ok_or_else(|| invalid(format!("no importance for layer {l}")))?;
            Ok((l, position_importance(wl)?))
        })
        .collect()
}

/// Number of positions across all insertable layers.
pub fn available_positions(model: &ModelGraph) -> usize {
    model.insertable_layers().iter().map(|&l| model.conv_spec(l).unwrap().filters + 1).sum()
}

/// `round(pct / 100 × available positions)`.
pub fn budget_from_percent(model: &ModelGraph, pct: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(invalid(format!("insertion percentage {pct} outside [0, 100]")));
    }
    Ok((pct / 100.0 * available_positions(model) as f64).round() as usize)
}

/// Top-`n` plan from gradient importance on `data`.
pub fn gradient_plan(model: &ModelGraph, data: &LabeledDataset, n: usize) -> Result<InsertionPlan> {
    let map = accumulate_abs_gradients(model, data)?;
    select_positions(&position_scores(model, &map)?, n)
}

/// `n` distinct positions drawn uniformly from the insertable ones.
pub fn random_plan(model: &ModelGraph, n: usize, seed: u64) -> Result<InsertionPlan> {
    let all: Vec<(usize, usize)> = model
        .insertable_layers()
        .into_iter()
        .flat_map(|l| (0..=model.conv_spec(l).unwrap().filters).map(move |j| (l, j)))
        .collect();
    if n > all.len() {
        return Err(invalid(format!("budget {n} exceeds {} available positions", all.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(InsertionPlan::new(index::sample(&mut rng, all.len(), n).into_iter().map(|i| all[i]).collect()))
}

/// Per conv layer record of which filters are original (`true`) and which
/// are interference filters (`false`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionBitmap {
    layers: OriginFlags,
}

impl PositionBitmap {
    pub fn new(layers: OriginFlags) -> Self {
        Self { layers }
    }

    /// All-ones bitmap for an unmodified model.
    pub fn identity(model: &ModelGraph) -> Self {
        Self::new(
            model
                .conv_layers()
                .into_iter()
                .map(|l| (l, vec![true; model.conv_spec(l).unwrap().filters]))
                .collect(),
        )
    }

    pub fn layers(&self) -> &OriginFlags {
        &self.layers
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.values().flatten().copied()
    }

    pub fn bit_len(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn interference_count(&self) -> usize {
        self.bits().filter(|b| !b).count()
    }

    /// Checks that the bitmap has one entry per filter of every conv layer.
    pub fn check_against(&self, model: &ModelGraph) -> Result<()> {
        let convs = model.conv_layers();
        if convs.len() != self.layers.len()
            || convs.iter().zip(&self.layers).any(|(&l, (&bl, bits))| {
                l != bl || model.conv_spec(l).unwrap().filters != bits.len()
            })
        {
            return Err(invalid("position bitmap does not fit the model's conv layers"));
        }
        Ok(())
    }
}

/// Inserts a fresh random filter at every planned position.
pub fn apply_insertion(
    secret: &ModelGraph,
    plan: &InsertionPlan,
    seed: u64,
) -> Result<(ModelGraph, PositionBitmap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stego, flags) = insert_filters(secret, &plan.by_layer(), &mut rng)?;
    Ok((stego, PositionBitmap::new(flags)))
}

/// Appends `[Flatten, HeadAdapter]` when the model's output does not match
/// `target_shape`. Returns the index of the first appended layer.
pub fn attach_adapter(
    model: &ModelGraph,
    target_shape: &[usize],
    seed: u64,
) -> Result<(ModelGraph, Option<usize>)> {
    let out = model.output_shape();
    if out == target_shape {
        return Ok((model.clone(), None));
    }
    let &[out_dim] = target_shape else {
        return Err(invalid(format!(
            "cannot adapt output {out:?} to {target_shape:?}: only flat targets are supported"
        )));
    };
    let start = model.layers().len();
    let mut extra = Vec::new();
    if out.len() > 1 {
        extra.push(LayerSpec::Flatten);
    }
    extra.push(LayerSpec::HeadAdapter { in_dim: out.iter().product(), out_dim });
    let head = ModelGraph::with_random_params(
        model.input_shape(),
        model.task(),
        [model.layers(), &extra].concat(),
        seed,
    )?;
    let mut params = model.params().to_vec();
    params.extend_from_slice(&head.params()[model.param_count()..]);
    let (input, task, layers, _) = head.into_parts();
    Ok((ModelGraph::new(input, task, layers, params)?, Some(start)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Targets};
    use crate::model::Task;
    use crate::surgery::remove_filters;
    use crate::tensor::Tensor;

    #[test]
    fn position_importance_examples() {
        let p = position_importance(&[0.1, 0.3, 0.2]).unwrap();
        let want = [0.1, 0.2, 0.25, 0.2];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(position_importance(&[0.7]).unwrap(), vec![0.7, 0.7]);
        assert_eq!(position_importance(&[2.0; 5]).unwrap(), vec![2.0; 6]);
        assert!(position_importance(&[]).is_err());
    }

    #[test]
    fn filter_mean_over_weights() {
        let spec = ConvSpec::new(2, 1, 2);
        let map = ImportanceMap::from_parts(BTreeMap::from([(
            0,
            (spec, vec![0.0, 0.0, 0.0, 4.0, 3.0, 3.0, 3.0, 3.0]),
        )]))
        .unwrap();
        assert_eq!(filter_importance(&map)[&0], vec![1.0, 3.0]);
    }

    #[test]
    fn selection_tie_break_and_budget() {
        let scores = BTreeMap::from([(1, vec![0.5, 0.9]), (3, vec![0.9, 0.1])]);
        assert_eq!(select_positions(&scores, 1).unwrap().positions(), &[(1, 1)]);
        assert_eq!(select_positions(&scores, 2).unwrap().positions(), &[(1, 1), (3, 0)]);
        assert!(select_positions(&scores, 0).unwrap().is_empty());
        assert!(select_positions(&scores, 5).is_err());
    }

    fn small_net() -> ModelGraph {
        let layers = vec![
            LayerSpec::Conv(ConvSpec::new(2, 1, 3)),
            LayerSpec::Activation(crate::model::Activation::Relu),
            LayerSpec::Conv(ConvSpec::new(2, 2, 3)),
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 2 * 16, out_dim: 2 },
        ];
        ModelGraph::with_random_params([1, 4, 4], Task::Classification, layers, 4).unwrap()
    }

    fn dataset(samples: Vec<f32>, labels: Vec<usize>) -> LabeledDataset {
        let n = labels.len();
        LabeledDataset::new(
            Tensor::new(vec![n, 1, 4, 4], samples).unwrap(),
            Targets::Classes { labels, n_classes: 2 },
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn duplicated_sample_doubles_the_map() {
        let m = small_net();
        let x: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin()).collect();
        let one = accumulate_abs_gradients(&m, &dataset(x.clone(), vec![1])).unwrap();
        let two = accumulate_abs_gradients(&m, &dataset([x.clone(), x].concat(), vec![1, 1])).unwrap();
        for l in one.layers() {
            for (a, b) in one.layer(l).unwrap().iter().zip(two.layer(l).unwrap()) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = small_net();
        let ds = LabeledDataset::new(
            Tensor::new(vec![0, 1, 4, 4], vec![]).unwrap(),
            Targets::Classes { labels: vec![], n_classes: 2 },
            Split::Train,
        )
        .unwrap();
        assert!(accumulate_abs_gradients(&m, &ds).is_err());
    }

    #[test]
    fn insertion_bookkeeping_and_preservation() {
        let m = small_net();
        let (empty, bits) = apply_insertion(&m, &InsertionPlan::default(), 0).unwrap();
        assert_eq!(empty, m);
        assert_eq!(bits, PositionBitmap::identity(&m));
        let plan = InsertionPlan::new(vec![(0, 1)]);
        let (s, bits) = apply_insertion(&m, &plan, 0).unwrap();
        assert_eq!(bits.layers()[&0], vec![true, false, true]);
        assert_eq!(s.param_count(), m.param_count() + 9 + 1 + 2 * 9);
        assert_eq!(remove_filters(&s, bits.layers()).unwrap(), m);
        assert!(apply_insertion(&m, &InsertionPlan::new(vec![(2, 0)]), 0).is_err());
    }

    #[test]
    fn percent_budget_rounds() {
        let m = small_net();
        assert_eq!(available_positions(&m), 3);
        assert_eq!(budget_from_percent(&m, 30.0).unwrap(), 1);
        assert_eq!(budget_from_percent(&m, 50.0).unwrap(), 2);
        assert!(budget_from_percent(&m, 120.0).is_err());
    }

    #[test]
    fn adapter_appended_only_on_mismatch() {
        let m = small_net();
        let (same, none) = attach_adapter(&m, &[2], 1).unwrap();
        assert_eq!((same, none), (m.clone(), None));
        let (a, start) = attach_adapter(&m, &[5], 1).unwrap();
        assert_eq!(start, Some(5));
        assert_eq!(a.output_shape(), vec![5]);
        assert_eq!(&a.params()[..m.param_count()], m.params());
        assert_eq!(a.truncated(5).unwrap(), m);
    }
}
