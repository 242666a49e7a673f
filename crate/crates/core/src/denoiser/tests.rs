use super::*;
use crate::phantom::Modality;
use crate::rng::rng_from;
use crate::tensor::gradcheck::finite_diff;
use crate::tensor::{AdamWConfig, AdamWState};

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig {
        c_z: 2,
        c_f: 3,
        base_width: 8,
        t_dim: 16,
        groups: 4,
        attn_width: 8,
        heads: 2,
        d_text: 12,
        bottleneck_self_attention: false,
    }
}

fn build<T: crate::tensor::Scalar>(cfg: DenoiserConfig, seed: u64) -> (DenoiserNet, Params<T>)
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    let mut params = Params::new();
    let mut rng = rng_from(seed);
    let net = DenoiserNet::init(&mut params, "den", cfg, &mut rng).unwrap();
    (net, params)
}

fn mask() -> AvailabilityMask {
    AvailabilityMask::new(Modality::C, [true, true, false]).unwrap()
}

fn inputs32(cfg: &DenoiserConfig, seed: u64) -> (NdTensor<f32>, NdTensor<f32>, NdTensor<f32>) {
    let mut rng = rng_from(seed);
    (
        NdTensor::randn(&[cfg.c_z, 4, 4, 4], 1.0, &mut rng),
        NdTensor::randn(&[cfg.c_f, 4, 4, 4], 1.0, &mut rng),
        NdTensor::randn(&[1, cfg.d_text], 1.0, &mut rng),
    )
}

#[test]
fn output_shape_matches_z_t() {
    let cfg = tiny_cfg();
    let (net, params) = build::<f32>(cfg, 1);
    let (z_t, z_f, z_txt) = inputs32(&cfg, 2);
    let out = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &mask(), 3).unwrap();
    assert_eq!(out.shape(), z_t.shape());
}

#[test]
fn fresh_net_predicts_exactly_zero() {
    let cfg = tiny_cfg();
    let (net, params) = build::<f32>(cfg, 3);
    let (z_t, z_f, z_txt) = inputs32(&cfg, 4);
    let out = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &mask(), 0).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0), "zero-init head must give zero output");
}

#[test]
fn misaligned_inputs_name_the_axis() {
    let cfg = tiny_cfg();
    let (net, params) = build::<f32>(cfg, 5);
    let mut rng = rng_from(6);
    let z_t = NdTensor::randn(&[cfg.c_z, 4, 4, 4], 1.0f32, &mut rng);
    let z_f = NdTensor::randn(&[cfg.c_f, 4, 2, 4], 1.0f32, &mut rng);
    let z_txt = NdTensor::randn(&[1, cfg.d_text], 1.0f32, &mut rng);
    let err = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &mask(), 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("axis H"), "error must name the axis: {err}");
}

#[test]
fn gradients_match_finite_differences_on_4cube() {
    let cfg = tiny_cfg();
    let (net, params64) = build::<f64>(cfg, 7);
    // The zero-init head blocks gradient flow to earlier parameters, so give
    // the head and the gates small nonzero values before checking.
    let mut params64 = params64;
    {
        let mut rng = rng_from(8);
        for name in ["den.out.conv.w", "den.out.conv.b", "den.inj0.gate", "den.inj1.gate"] {
            let t = params64.get_mut(name);
            for v in t.data_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
    }
    let mut rng = rng_from(9);
    let z_t = NdTensor::<f64>::randn(&[cfg.c_z, 4, 4, 4], 1.0, &mut rng);
    let z_f = NdTensor::<f64>::randn(&[cfg.c_f, 4, 4, 4], 1.0, &mut rng);
    let z_txt = NdTensor::<f64>::randn(&[2, cfg.d_text], 1.0, &mut rng);
    let am = mask();

    let inputs: Vec<NdTensor<f64>> = params64.iter().map(|(_, t)| t.clone()).collect();
    let check = finite_diff(&inputs, 1e-4, Some((3, 11)), |tape, vars| {
        let bind = crate::tensor::ParamBinding::from_vars(&params64, vars.to_vec());
        let z_t = tape.constant(z_t.clone());
        let z_f = tape.constant(z_f.clone());
        let z_txt = tape.constant(z_txt.clone());
        let eps_hat = net.forward_tape(tape, &bind, z_t, z_f, z_txt, &am, 2)?;
        let sq = tape.mul(eps_hat, eps_hat)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(
        check.max_rel_err < 1e-4,
        "denoiser gradient rel err {} over {} probes",
        check.max_rel_err,
        check.probes
    );
}

#[test]
fn count_parameters_is_deterministic_and_monotone_in_width() {
    let cfg = tiny_cfg();
    let (_, p1) = build::<f32>(cfg, 1);
    let (_, p2) = build::<f32>(cfg, 2);
    assert_eq!(p1.scalar_count(), p2.scalar_count());

    let wide = DenoiserConfig { base_width: 16, ..cfg };
    let (_, p3) = build::<f32>(wide, 1);
    assert!(p3.scalar_count() > p1.scalar_count());
}

#[test]
fn count_parameters_matches_closed_form() {
    let cfg = tiny_cfg();
    let (_, params) = build::<f32>(cfg, 1);
    let (w, td, cz, cf, aw, dt) = (
        cfg.base_width,
        cfg.t_dim,
        cfg.c_z,
        cfg.c_f,
        cfg.attn_width,
        cfg.d_text,
    );
    let hidden = 64; // FiLM MLP hidden width
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k * k + co;
    let lin = |di: usize, do_: usize| di * do_ + do_;
    let gn = |c: usize| 2 * c;
    let res = |ci: usize, co: usize| {
        gn(ci)
            + conv(ci, co, 3)
            + lin(td, hidden)
            + lin(hidden, 2 * co)
            + gn(co)
            + conv(co, co, 3)
            + if ci != co { conv(ci, co, 1) } else { 0 }
    };
    let inject = |c: usize| c * aw + dt * aw + dt * aw + aw * c + 1;
    let expected = lin(td, td) + lin(td, td)          // trunk
        + 3 * td                                       // availability projection
        + conv(cz + cf, w, 3)                          // stem
        + res(w, w)                                    // enc0
        + conv(w, 2 * w, 3)                            // down
        + res(2 * w, 2 * w)                            // mid
        + conv(2 * w, w, 3)                            // up
        + res(2 * w, w) + inject(w)                    // dec0 + inject
        + res(w, w) + inject(w)                        // dec1 + inject
        + gn(w) + conv(w, cz, 3);                      // out head
    assert_eq!(params.scalar_count(), expected);
}

#[test]
fn film_conditioning_separates_timesteps_after_one_step() {
    let cfg = tiny_cfg();
    let (net, mut params) = build::<f32>(cfg, 21);
    let (z_t, z_f, z_txt) = inputs32(&cfg, 22);
    let am = mask();

    // Fresh net: both timesteps give zero, indistinguishable.
    let a0 = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &am, 0).unwrap();
    let a1 = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &am, 63).unwrap();
    assert_eq!(a0.data(), a1.data());

    // A few AdamW steps against random targets (the zero-init head only
    // unblocks upstream gradients after it has moved itself).
    let mut opt = AdamWState::new(&params, AdamWConfig { lr: 1e-2, ..Default::default() }).unwrap();
    let mut rng = rng_from(23);
    for step in 0..4 {
        let target = NdTensor::<f32>::randn(&[cfg.c_z, 4, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let zt = tape.constant(z_t.clone());
        let zf = tape.constant(z_f.clone());
        let ztx = tape.constant(z_txt.clone());
        let eps_hat = net
            .forward_tape(&mut tape, &bind, zt, zf, ztx, &am, 7 * step + 1)
            .unwrap();
        let tgt = tape.constant(target);
        let diff = tape.sub(eps_hat, tgt).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        let grads = bind.grads(&tape);
        opt.step(&mut params, &grads).unwrap();
    }

    let b0 = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &am, 0).unwrap();
    let b1 = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &am, 63).unwrap();
    let max_diff = b0
        .data()
        .iter()
        .zip(b1.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff > 0.0, "timestep conditioning must be non-degenerate after training");
}

#[test]
fn text_embeddings_change_output_once_gates_are_nonzero() {
    let cfg = tiny_cfg();
    let (net, mut params) = build::<f32>(cfg, 31);
    params.get_mut("den.inj0.gate").data_mut()[0] = 0.3;
    params.get_mut("den.inj1.gate").data_mut()[0] = 0.3;
    // Non-zero head so outputs are not identically zero.
    {
        let mut rng = rng_from(32);
        for v in params.get_mut("den.out.conv.w").data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    let (z_t, z_f, _) = inputs32(&cfg, 33);
    let mut rng = rng_from(34);
    let text_a = NdTensor::<f32>::randn(&[1, cfg.d_text], 1.0, &mut rng);
    let text_b = NdTensor::<f32>::randn(&[1, cfg.d_text], 1.0, &mut rng);
    let am = mask();
    let out_a = predict_noise(&net, &params, &z_t, &z_f, &text_a, &am, 2).unwrap();
    let out_b = predict_noise(&net, &params, &z_t, &z_f, &text_b, &am, 2).unwrap();
    let max_diff = out_a
        .data()
        .iter()
        .zip(out_b.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff > 0.0, "text conditioning must reach the output");
}

#[test]
fn batch_order_does_not_leak_between_elements() {
    let cfg = tiny_cfg();
    let (net, params) = build::<f32>(cfg, 41);
    let (z_a, z_fa, z_ta) = inputs32(&cfg, 42);
    let (z_b, z_fb, z_tb) = inputs32(&cfg, 43);
    let am = mask();
    let run = |z: &NdTensor<f32>, f: &NdTensor<f32>, t: &NdTensor<f32>| {
        predict_noise(&net, &params, z, f, t, &am, 1).unwrap().into_data()
    };
    let (a1, b1) = (run(&z_a, &z_fa, &z_ta), run(&z_b, &z_fb, &z_tb));
    let (b2, a2) = (run(&z_b, &z_fb, &z_tb), run(&z_a, &z_fa, &z_ta));
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn bottleneck_self_attention_flag_builds_and_runs() {
    let cfg = DenoiserConfig { bottleneck_self_attention: true, ..tiny_cfg() };
    let (net, params) = build::<f32>(cfg, 51);
    let (z_t, z_f, z_txt) = inputs32(&cfg, 52);
    let out = predict_noise(&net, &params, &z_t, &z_f, &z_txt, &mask(), 1).unwrap();
    assert_eq!(out.shape(), z_t.shape());
    let (_, plain_params) = build::<f32>(tiny_cfg(), 51);
    assert!(params.scalar_count() > plain_params.scalar_count());
}
