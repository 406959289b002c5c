#[test]
fn eps_probe_cbam() {
    use gru_aunet::gradcheck::gradcheck;
    use gru_aunet::head::{cbam_gru_block, init_cbam_gru};
    use gru_aunet::params::{ModelCtx, ParamSet};
    use gru_aunet::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let offset_bias = |n: usize| {
        Tensor::from_fn(&[n], |i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.35 + 0.04 * (i as f64 % 7.0))
        })
    };
    for point in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ (point * 7919) ^ 14);
        let n = 512usize;
        let mut vals: Vec<f64> = (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect();
        vals.shuffle(&mut rng);
        let mut i = 0;
        let x = Tensor::from_fn(&[8, 8, 8], |_| { let v = vals[i]; i += 1; v });
        let h = Tensor::from_fn(&[8], |_| (rng.random::<f64>() * 2.0 - 1.0) * 0.5);
        for eps in [1e-3, 3e-4, 1e-4, 1e-5] {
            let rep = gradcheck(
                "cbam",
                |g, v| {
                    let mut ps = ParamSet::<f64>::new();
                    let mut prng = ChaCha8Rng::seed_from_u64(41);
                    let p = init_cbam_gru(&mut ps, &mut prng, "c", 8, 4, 7);
                    ps.set(p.fc1_b, offset_bias(2));
                    let mut cx = ModelCtx::new(g, &ps);
                    let o = cbam_gru_block(&mut cx, v[0], v[1], &p)?;
                    let a = g.mul(o.out, o.out)?;
                    let b = g.mul(o.h_next, o.h_next)?;
                    let sa = g.sum_all(a)?;
                    let sb = g.sum_all(b)?;
                    g.add(sa, sb)
                },
                &[x.clone(), h.clone()],
                eps,
                1e-4,
            )
            .unwrap();
            println!(
                "point={point} eps={eps:.0e} max_rel={:.3e} per_input=[{:.2e}, {:.2e}]",
                rep.max_rel_err, rep.per_input[0].max_rel_err, rep.per_input[1].max_rel_err
            );
        }
    }
}
