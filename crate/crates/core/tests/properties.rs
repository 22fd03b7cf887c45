//! Property tests over randomized shapes and values.

use deblur_core::attention::{
    channel_attention_with_gate, self_attention, self_attention_with_map, ChannelAttentionParams,
    SelfAttentionParams,
};
use deblur_core::blocks::{res_block, rir_block, ResBlockParams, RiRBlockParams};
use deblur_core::imaging::Image8;
use deblur_core::metrics::{psnr, ssim};
use deblur_core::norm::Mode;
use deblur_core::{Graph, Rng, Tensor};
use proptest::prelude::*;

fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_is_a_distribution(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9) {
        let x = random_tensor(seed, &[rows, cols], -30.0, 30.0);
        let mut g = Graph::new();
        let v = g.leaf(x, false);
        let y = g.softmax(v, 1).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn self_attention_preserves_shape_and_rows_sum(seed in 0u64..500, h in 1usize..4, w in 1usize..4) {
        let mut rng = Rng::new(seed);
        let p = SelfAttentionParams::<f64>::init("sa", 8, &mut rng);
        let x = random_tensor(seed ^ 1, &[1, 8, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let (y, attn) = self_attention_with_map(&mut g, v, &p).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());
        let hw = h * w;
        for row in g.value(attn).data().chunks(hw) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_zero_identity_over_random_params(seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let p = SelfAttentionParams::<f64>::init("sa", 16, &mut rng);
        let x = random_tensor(seed ^ 2, &[1, 16, 2, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let y = self_attention(&mut g, v, &p).unwrap();
        prop_assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn channel_attention_is_a_contraction(seed in 0u64..500, h in 1usize..5) {
        let mut rng = Rng::new(seed);
        let p = ChannelAttentionParams::<f64>::init("ca", 16, 16, &mut rng).unwrap();
        let x = random_tensor(seed ^ 3, &[2, 16, h, h], -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let (y, gate) = channel_attention_with_gate(&mut g, v, &p).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());
        for &a in g.value(gate).data() {
            prop_assert!(a > 0.0 && a < 1.0);
        }
        for (out, inp) in g.value(y).data().iter().zip(x.data()) {
            prop_assert!(out.abs() <= inp.abs() + 1e-15);
        }
    }

    #[test]
    fn res_and_rir_blocks_honor_shape_contracts(seed in 0u64..200, size_pow in 2usize..5) {
        let sz = 1 << size_pow; // 4, 8, 16
        let mut rng = Rng::new(seed);
        let res = ResBlockParams::<f64>::init("r", 16, 4, false, &mut rng).unwrap();
        let x = random_tensor(seed ^ 4, &[1, 16, sz, sz], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let y = res_block(&mut g, v, &mut res.clone(), Mode::Frozen).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());

        let enc = RiRBlockParams::<f64>::init("e", 16, 32, 4, false, false, &mut rng).unwrap();
        let down = rir_block(&mut g, v, &mut enc.clone(), Mode::Frozen).unwrap();
        prop_assert_eq!(g.shape(down), &[1, 32, sz / 2, sz / 2]);
        let dec = RiRBlockParams::<f64>::init("d", 32, 16, 4, true, false, &mut rng).unwrap();
        let up = rir_block(&mut g, down, &mut dec.clone(), Mode::Frozen).unwrap();
        prop_assert_eq!(g.shape(up), x.shape());
    }

    #[test]
    fn ssim_bounded_and_psnr_symmetric(seed in 0u64..300) {
        let mut rng = Rng::new(seed);
        let mk = |rng: &mut Rng| {
            Image8::new(12, 12, 3, (0..12 * 12 * 3).map(|_| rng.below(256) as u8).collect())
                .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
        let p_ab = psnr(&a, &b).unwrap();
        let p_ba = psnr(&b, &a).unwrap();
        prop_assert!((p_ab - p_ba).abs() < 1e-12);
    }
}
