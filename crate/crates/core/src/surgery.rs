//! Filter insertion and removal in conv layers.
//!
//! Changing the filter count of conv layer `l` changes the input channel
//! count of the next parametric layer, which must itself be a conv layer.
//! Copied scalars keep their exact bit patterns; new scalars are drawn
//! uniformly with the fan-in bound of their (rebuilt) layer, in canonical
//! parameter order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{init_bound, LayerSpec, ModelGraph};

/// For each filter of a rebuilt layer: the source filter it copies, or
/// `None` for a freshly drawn one.
type Layout = Vec<Option<usize>>;

/// Per conv layer flags, one per filter of the rebuilt model: `true` for a
/// filter carried over from the input model, `false` for an inserted one.
pub type OriginFlags = BTreeMap<usize, Vec<bool>>;

fn rebuild(
    model: &ModelGraph,
    layouts: &BTreeMap<usize, Layout>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ModelGraph> {
    for &l in layouts.keys() {
        if !model.is_insertable(l) {
            return Err(invalid(format!(
                "layer {l} is not a conv layer followed by another conv layer"
            )));
        }
    }
    let ranges = model.param_ranges();
    let src = model.params();
    let mut layers = model.layers().to_vec();
    let mut params = Vec::with_capacity(src.len());
    let mut pending_channels: Option<Layout> = None;
    let mut draw = |bound: f32| -> Result<f32> {
        match rng.as_deref_mut() {
            Some(r) => Ok(r.random_range(-bound..bound)),
            None => Err(Error::Internal("surgery needs fresh values but has no rng".into())),
        }
    };
    for (i, layer) in layers.iter_mut().enumerate() {
        let Some(range) = ranges[i].clone() else { continue };
        let LayerSpec::Conv(spec) = *layer else {
            params.extend_from_slice(&src[range.all()]);
            continue;
        };
        let filters = layouts
            .get(&i)
            .cloned()
            .unwrap_or_else(|| (0..spec.filters).map(Some).collect());
        let channels =
            pending_channels.take().unwrap_or_else(|| (0..spec.channels).map(Some).collect());
        if filters.iter().flatten().any(|&f| f >= spec.filters)
            || channels.iter().flatten().any(|&c| c >= spec.channels)
        {
            return Err(Error::Internal(format!("layer {i}: layout refers past the source layer")));
        }
        let mut new_spec = spec;
        new_spec.filters = filters.len();
        new_spec.channels = channels.len();
        let ss = spec.kernel * spec.kernel;
        let bound = init_bound(new_spec.filter_len());
        let w = &src[range.weights];
        let b = &src[range.bias];
        for f in &filters {
            for c in &channels {
                match (f, c) {
                    (Some(f), Some(c)) => {
                        let at = (f * spec.channels + c) * ss;
                        params.extend_from_slice(&w[at..at + ss]);
                    }
                    _ => {
                        for _ in 0..ss {
                            params.push(draw(bound)?);
                        }
                    }
                }
            }
        }
        for f in &filters {
            params.push(match f {
                Some(f) => b[*f],
                None => draw(bound)?,
            });
        }
        if layouts.contains_key(&i) {
            pending_channels = Some(filters);
        }
        *layer = LayerSpec::Conv(new_spec);
    }
    ModelGraph::new(model.input_shape(), model.task(), layers, params)
}

/// Inserts new filters. `positions[l]` lists insertion positions in layer
/// `l`, each in `0..=d` (before original filter `j`, or after the last one
/// for `j = d`); a position may appear at most once.
pub fn insert_filters(
    model: &ModelGraph,
    positions: &BTreeMap<usize, Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelGraph, OriginFlags)> {
    let mut layouts = BTreeMap::new();
    for (&l, ps) in positions {
        let d = model
            .conv_spec(l)
            .ok_or_else(|| invalid(format!("layer {l} is not a conv layer")))?
            .filters;
        let mut sorted = ps.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid(format!("layer {l}: duplicate insertion position")));
        }
        if sorted.last().is_some_and(|&p| p > d) {
            return Err(invalid(format!("layer {l}: insertion position beyond {d}")));
        }
        let mut layout = Vec::with_capacity(d + sorted.len());
        let mut next = sorted.iter().peekable();
        for j in 0..=d {
            if next.peek() == Some(&&j) {
                next.next();
                layout.push(None);
            }
            if j < d {
                layout.push(Some(j));
            }
        }
        layouts.insert(l, layout);
    }
    let rebuilt = rebuild(model, &layouts, Some(rng))?;
    let flags = origin_flags(&rebuilt, &layouts);
    Ok((rebuilt, flags))
}

/// Removes every filter flagged `false`, together with the input channel it
/// feeds in the next conv layer. Layers without an entry are kept whole.
pub fn remove_filters(model: &ModelGraph, keep: &OriginFlags) -> Result<ModelGraph> {
    let mut layouts = BTreeMap::new();
    for (&l, flags) in keep {
        let d = model
            .conv_spec(l)
            .ok_or_else(|| invalid(format!("layer {l} is not a conv layer")))?
            .filters;
        if flags.len() != d {
            return Err(invalid(format!("layer {l}: {} flags for {d} filters", flags.len())));
        }
        if flags.iter().all(|&k| k) {
            continue;
        }
        layouts.insert(l, flags.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| Some(i)).collect());
    }
    rebuild(model, &layouts, None)
}

fn origin_flags(model: &ModelGraph, layouts: &BTreeMap<usize, Layout>) -> OriginFlags {
    model
        .conv_layers()
        .into_iter()
        .map(|l| {
            let flags = match layouts.get(&l) {
                Some(layout) => layout.iter().map(Option::is_some).collect(),
                None => vec![true; model.conv_spec(l).unwrap().filters],
            };
            (l, flags)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvSpec, Task};
    use rand::SeedableRng;

    fn two_conv() -> ModelGraph {
        let layers = vec![
            LayerSpec::Conv(ConvSpec::new(2, 1, 3)),
            LayerSpec::Conv(ConvSpec::new(2, 2, 3)),
        ];
        ModelGraph::with_random_params([1, 6, 6], Task::Denoising, layers, 21).unwrap()
    }

    #[test]
    fn insert_one_filter_bookkeeping() {
        let m = two_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = BTreeMap::from([(0, vec![1])]);
        let (s, flags) = insert_filters(&m, &pos, &mut rng).unwrap();
        assert_eq!(s.conv_spec(0).unwrap().filters, 3);
        assert_eq!(s.conv_spec(1).unwrap().channels, 3);
        assert_eq!(s.param_range(0).unwrap().all().len(), 3 * 9 + 3);
        assert_eq!(s.param_range(1).unwrap().all().len(), 2 * 27 + 2);
        assert_eq!(flags[&0], vec![true, false, true]);
        assert_eq!(flags[&1], vec![true, true]);
        assert_eq!(remove_filters(&s, &flags).unwrap(), m);
    }

    #[test]
    fn boundary_positions() {
        let m = two_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, first) = insert_filters(&m, &BTreeMap::from([(0, vec![0])]), &mut rng).unwrap();
        let (_, last) = insert_filters(&m, &BTreeMap::from([(0, vec![2])]), &mut rng).unwrap();
        assert_eq!(first[&0], vec![false, true, true]);
        assert_eq!(last[&0], vec![true, true, false]);
    }

    #[test]
    fn rejects_non_insertable_layer() {
        let m = two_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(insert_filters(&m, &BTreeMap::from([(1, vec![0])]), &mut rng).is_err());
        assert!(insert_filters(&m, &BTreeMap::from([(0, vec![3])]), &mut rng).is_err());
        assert!(insert_filters(&m, &BTreeMap::from([(0, vec![1, 1])]), &mut rng).is_err());
    }

    #[test]
    fn empty_insertion_is_identity() {
        let m = two_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = insert_filters(&m, &BTreeMap::new(), &mut rng).unwrap();
        assert_eq!(s, m);
    }
}
