use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netsteg_core::autograd::{finite_diff_gradcheck, LossSpec, OutputLoss};
use netsteg_core::gfi::{apply_insertion, random_plan, select_positions, InsertionPlan};
use netsteg_core::model::{ber, Activation};
use netsteg_core::model_file::{deserialize, serialize};
use netsteg_core::optim::{masked_step, AdamConfig, MaskSet, OptimState};
use netsteg_core::sih::{decode_payload, embed_lsb, encode_payload, extract_lsb, SideInfo};
use netsteg_core::surgery::remove_filters;
use netsteg_core::{ConvSpec, LayerSpec, ModelGraph, Task, Tensor};

fn small_net(f1: usize, f2: usize, f3: usize, seed: u64) -> ModelGraph {
    net_with(Activation::Relu, f1, f2, f3, seed)
}

fn net_with(act: Activation, f1: usize, f2: usize, f3: usize, seed: u64) -> ModelGraph {
    let act = LayerSpec::Activation(act);
    ModelGraph::with_random_params(
        [1, 8, 8],
        Task::Classification,
        vec![
            LayerSpec::Conv(ConvSpec::new(f1, 1, 3)),
            act,
            LayerSpec::Conv(ConvSpec::new(f2, f1, 3)),
            act,
            LayerSpec::Conv(ConvSpec::new(f3, f2, 3)),
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: f3 * 64, out_dim: 3 },
        ],
        seed,
    )
    .unwrap()
}

fn net() -> impl Strategy<Value = ModelGraph> {
    (1usize..5, 1usize..5, 1usize..4, any::<u64>()).prop_map(|(a, b, c, s)| small_net(a, b, c, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ber_is_symmetric_and_bounded(m in net(), seed in any::<u64>(), flips in 0usize..40) {
        let mut other = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = other.param_count();
        for _ in 0..flips {
            let i = rand::Rng::random_range(&mut rng, 0..n);
            let b = rand::Rng::random_range(&mut rng, 0..32u32);
            let p = &mut other.params_mut()[i];
            *p = f32::from_bits(p.to_bits() ^ 1 << b);
        }
        let ab = ber(&m, &other).unwrap();
        prop_assert_eq!(ab, ber(&other, &m).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ab <= flips as f64 / (32 * n) as f64 + 1e-15);
        prop_assert_eq!(ber(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn serialization_is_bit_exact(m in net(), raw in prop::collection::vec(any::<u32>(), 8)) {
        let mut m = m;
        for (p, r) in m.params_mut().iter_mut().zip(&raw) {
            *p = f32::from_bits(*r);
        }
        let back = deserialize(&serialize(&m)).unwrap();
        prop_assert_eq!(back.layers(), m.layers());
        prop_assert_eq!(back.task(), m.task());
        let a: Vec<u32> = m.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = back.params().iter().map(|p| p.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gradient_plans_nest(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..8), 1..4),
        n in 0usize..6,
        extra in 0usize..6,
    ) {
        let map: BTreeMap<usize, Vec<f64>> = scores.into_iter().enumerate().map(|(i, v)| (3 * i, v)).collect();
        let total: usize = map.values().map(Vec::len).sum();
        let n = n.min(total);
        let m = (n + extra).min(total);
        let small = select_positions(&map, n).unwrap();
        let large = select_positions(&map, m).unwrap();
        prop_assert_eq!(small.positions(), &large.positions()[..n]);
    }

    #[test]
    fn insertion_then_removal_restores_secret(m in net(), n in 0usize..6, seed in any::<u64>()) {
        let n = n.min(netsteg_core::gfi::available_positions(&m));
        let plan: InsertionPlan = random_plan(&m, n, seed).unwrap();
        let (stego, bitmap) = apply_insertion(&m, &plan, seed ^ 1).unwrap();
        prop_assert_eq!(bitmap.interference_count(), n);
        prop_assert_eq!(stego.param_count() >= m.param_count(), true);
        let back = remove_filters(&stego, bitmap.layers()).unwrap();
        prop_assert_eq!(ber(&m, &back).unwrap(), 0.0);
        prop_assert_eq!(back.layers(), m.layers());
    }

    #[test]
    fn side_frame_round_trips(
        bitmap in prop::collection::vec(any::<bool>(), 0..300),
        adapter in prop::option::of(0usize..60000),
        denoise in any::<bool>(),
    ) {
        let info = SideInfo {
            bitmap,
            adapter_start: adapter,
            secret_task: if denoise { Task::Denoising } else { Task::Classification },
        };
        let bits = encode_payload(&info).unwrap();
        prop_assert_eq!(bits.len(), info.frame_bits());
        prop_assert_eq!(decode_payload(&bits).unwrap(), info);
    }

    #[test]
    fn lsb_embedding_only_touches_low_bits(
        params in prop::collection::vec(-10.0f32..10.0, 1..40),
        k in 1u32..=23,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_bits = rand::Rng::random_range(&mut rng, 0..=params.len() * k as usize);
        let bits: Vec<bool> = (0..n_bits).map(|_| rand::Rng::random(&mut rng)).collect();
        let mut out = params.clone();
        embed_lsb(&mut out, &bits, k).unwrap();
        let high = !((1u32 << k) - 1);
        for (a, b) in params.iter().zip(&out) {
            prop_assert_eq!(a.to_bits() & high, b.to_bits() & high);
        }
        prop_assert_eq!(extract_lsb(&out, n_bits, k).unwrap(), bits);
    }

    #[test]
    fn masked_adam_never_moves_frozen_slots(
        len in 1usize..64,
        seed in any::<u64>(),
        steps in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f32> = (0..len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mask = MaskSet::from_bits((0..len).map(|_| rand::Rng::random(&mut rng)).collect());
        let before = params.clone();
        let mut state = OptimState::new(len, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..steps {
            let grads: Vec<f64> = (0..len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            masked_step(&mut params, &grads, &mask, &mut state).unwrap();
        }
        for i in 0..len {
            if !mask.get(i) {
                prop_assert_eq!(params[i].to_bits(), before[i].to_bits());
                prop_assert_eq!(state.first_moment()[i], 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        (a, b, c, s) in (1usize..5, 1usize..5, 1usize..4, any::<u64>()),
        seed in any::<u64>(),
    ) {
        // linear activations keep the loss smooth, so no step can straddle a kink
        let m = net_with(Activation::Identity, a, b, c, s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..2 * 64).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 1, 8, 8], x).unwrap();
        let worst = finite_diff_gradcheck(&m, &batch, &LossSpec::new(OutputLoss::HalfSquaredNorm), 1e-5).unwrap();
        prop_assert!(worst < 1e-4, "worst relative error {}", worst);
    }
}
