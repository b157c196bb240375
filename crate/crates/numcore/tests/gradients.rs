use numcore::gradcheck::{check_params, random_case, PRIMITIVES};
use numcore::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for &p in PRIMITIVES {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let case = random_case(p, &mut rng);
            let r = check_params(&case.store, 1e-5, &case.loss).unwrap();
            assert!(r.max_rel_err < 1e-4, "{p}: {r:?}");
            worst = worst.max(r.max_rel_err);
        }
        println!("{p:>14}: worst relative error {worst:.2e}");
    }
}

#[test]
fn random_three_layer_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.init_uniform("w1", &[4, 6], 4, &mut rng);
    store.init_uniform("b1", &[6], 4, &mut rng);
    store.init_uniform("w2", &[6, 5], 6, &mut rng);
    store.init_uniform("b2", &[5], 6, &mut rng);
    store.init_uniform("w3", &[5, 3], 5, &mut rng);
    store.init_uniform("b3", &[3], 5, &mut rng);
    let x = Tensor::new(&[2, 4], vec![0.3, -1.2, 0.8, 1.5, -0.4, 0.1, 2.0, -0.9]).unwrap();
    let r = check_params(&store, 1e-5, |g, s| {
        let xi = g.input(x.clone());
        let (w1, b1) = (g.param(s, "w1")?, g.param(s, "b1")?);
        let h = numcore::nn::linear(g, xi, w1, b1)?;
        let h = g.tanh(h);
        let (w2, b2) = (g.param(s, "w2")?, g.param(s, "b2")?);
        let h = numcore::nn::linear(g, h, w2, b2)?;
        let h = g.sigmoid(h);
        let (w3, b3) = (g.param(s, "w3")?, g.param(s, "b3")?);
        let y = numcore::nn::linear(g, h, w3, b3)?;
        let y = g.softmax_rows(y)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[rows, cols], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_conv_ignores_future(t in 2usize..10, cut in 0usize..9, dilation in 1usize..4, seed in any::<u64>()) {
        let cut = cut % (t - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect() };
        let x = rand_vec(2 * 3 * t);
        let w = Tensor::new(&[4, 3, 3], rand_vec(36)).unwrap();
        let b = Tensor::new(&[4], rand_vec(4)).unwrap();
        let mut x2 = x.clone();
        let noise = rand_vec(x.len());
        for n in 0..2 {
            for c in 0..3 {
                for ti in cut + 1..t {
                    x2[(n * 3 + c) * t + ti] += noise[(n * 3 + c) * t + ti] + 1.0;
                }
            }
        }
        let run = |xs: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(&[2, 3, t], xs).unwrap());
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.conv1d_causal(xv, wv, bv, dilation).unwrap();
            g.value(y).clone()
        };
        let (y1, y2) = (run(x), run(x2));
        for n in 0..2 {
            for o in 0..4 {
                for ti in 0..=cut {
                    let i = (n * 4 + o) * t + ti;
                    prop_assert_eq!(y1.data()[i].to_bits(), y2.data()[i].to_bits());
                }
            }
        }
    }
}

#[test]
fn impulse_response_has_causal_support() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let w = g.input(Tensor::new(&[1, 1, 2], vec![0.7, -0.3]).unwrap());
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv1d_causal(x, w, b, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.7, -0.3, 0.0, 0.0, 0.0]);
}
