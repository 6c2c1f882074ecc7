//! Central finite differences in f64 against tape gradients for every op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repnerv::model::ModelConfig;
use repnerv::rep_blocks::{BlockConfig, RepBlock, SOBEL_X};
use repnerv::training::loss_tape;
use repnerv::{Op, RepLayer, RepMode, RepNerv, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const MAX_PROBES: usize = 64;

fn rand_t(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Projects a non-scalar output onto fixed random weights.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = rand_t(t.value(y).shape(), -1.0, 1.0, seed);
    let w = t.constant(w);
    t.dot(y, w).unwrap()
}

/// Compares the tape gradient of `f` with central differences at up to
/// `MAX_PROBES` coordinates of every parameter.
fn check(name: &str, params: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    check_built(name, params, |t, ps| {
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        (f(t, &vs), vs)
    })
}

/// Like [`check`], but `build` registers the parameters itself and returns
/// the scalar output with the parameter handles in `params` order.
fn check_built(name: &str, params: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Var, Vec<Var>)) {
    let mut t = Tape::new();
    let (out, vars) = build(&mut t, params);
    assert_eq!(vars.len(), params.len());
    assert_eq!(t.value(out).len(), 1, "{name}: loss must be scalar");
    let g = t.backward(out).unwrap();
    let eval = |ps: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let (o, _) = build(&mut t, ps);
        t.value(o).data()[0]
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = g.wrt(vars[pi]);
        let stride = p.len().div_ceil(MAX_PROBES).max(1);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        let mut ps = params.to_vec();
        for idx in (0..p.len()).step_by(stride) {
            let orig = ps[pi].data()[idx];
            ps[pi].data_mut()[idx] = orig + H;
            let up = eval(&ps);
            ps[pi].data_mut()[idx] = orig - H;
            let down = eval(&ps);
            ps[pi].data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * H);
            num = num.max((analytic.data()[idx] - fd).abs());
            den = den.max(fd.abs());
        }
        let rel = if den == 0.0 { num } else { num / den };
        assert!(rel <= TOL, "{name}: param {pi} relative error {rel:e}");
    }
}

#[test]
fn conv2d_with_each_padding() {
    for (i, (kh, kw, ph, pw)) in [(3, 3, 1, 1), (1, 3, 0, 1), (3, 1, 1, 0), (1, 1, 0, 0), (3, 3, 0, 0)].into_iter().enumerate() {
        let ps = [
            rand_t([2, 3, 5, 6], -1.0, 1.0, 1),
            rand_t([4, 3, kh, kw], -1.0, 1.0, 2),
            rand_t([1, 4, 1, 1], -1.0, 1.0, 3),
        ];
        check(&format!("conv2d #{i}"), &ps, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ph, pw).unwrap();
            project(t, y, 9)
        });
    }
}

#[test]
fn linear_layer() {
    let ps = [rand_t([3, 5, 1, 1], -1.0, 1.0, 1), rand_t([4, 5, 1, 1], -1.0, 1.0, 2), rand_t([1, 4, 1, 1], -1.0, 1.0, 3)];
    check("linear", &ps, |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        project(t, y, 4)
    });
}

#[test]
fn pixel_shuffle_gelu_reshape() {
    let ps = [rand_t([2, 8, 3, 2], -3.0, 3.0, 5)];
    check("pixel_shuffle", &ps, |t, v| {
        let y = t.pixel_shuffle(v[0], 2).unwrap();
        project(t, y, 6)
    });
    check("gelu", &ps, |t, v| {
        let y = t.gelu(v[0]).unwrap();
        project(t, y, 6)
    });
    check("reshape", &ps, |t, v| {
        let y = t.reshape(v[0], [1, 4, 12, 2]).unwrap();
        project(t, y, 6)
    });
}

#[test]
fn add_affine_sum_dot() {
    let ps = [rand_t([1, 2, 3, 3], -1.0, 1.0, 7), rand_t([1, 2, 3, 3], -1.0, 1.0, 8)];
    check("add", &ps, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 1)
    });
    check("affine", &ps, |t, v| {
        let y = t.affine(v[0], -1.7, 0.3).unwrap();
        project(t, y, 1)
    });
    check("sum", &ps, |t, v| {
        let y = t.gelu(v[0]).unwrap();
        t.sum(y).unwrap()
    });
    check("dot", &ps, |t, v| t.dot(v[0], v[1]).unwrap());
}

#[test]
fn pad_depthwise_and_channel_scale() {
    let ps = [rand_t([2, 3, 4, 5], -1.0, 1.0, 10), rand_t([1, 3, 1, 1], -1.0, 1.0, 11)];
    check("pad", &ps[..1], |t, v| {
        let y = t.push(Op::Pad { x: v[0], p: 1 }).unwrap();
        project(t, y, 2)
    });
    for pad in [0, 1] {
        check("depthwise_fixed", &ps[..1], |t, v| {
            let y = t.push(Op::DepthwiseFixed { x: v[0], filter: SOBEL_X, pad }).unwrap();
            project(t, y, 2)
        });
    }
    check("channel_scale", &ps, |t, v| {
        let y = t.push(Op::ChannelScale { x: v[0], s: v[1] }).unwrap();
        project(t, y, 2)
    });
}

#[test]
fn kernel_algebra() {
    for (kh, kw) in [(1, 3), (3, 1), (1, 1), (3, 3)] {
        check("pad_kernel", &[rand_t([2, 3, kh, kw], -1.0, 1.0, 12)], |t, v| {
            let y = t.push(Op::PadKernel { k: v[0] }).unwrap();
            project(t, y, 3)
        });
    }
    let cases = [([4, 3, 1, 1], [3, 2, 3, 3]), ([4, 3, 3, 3], [3, 2, 1, 1]), ([4, 3, 1, 1], [3, 2, 1, 1])];
    for (a, b) in cases {
        let ps = [rand_t(a, -1.0, 1.0, 13), rand_t(b, -1.0, 1.0, 14)];
        check("compose_pointwise", &ps, |t, v| {
            let y = t.push(Op::ComposePointwise { outer: v[0], inner: v[1] }).unwrap();
            project(t, y, 3)
        });
    }
    for k in [[4, 3, 3, 3], [4, 3, 1, 1]] {
        let ps = [rand_t(k, -1.0, 1.0, 15), rand_t([1, 3, 1, 1], -1.0, 1.0, 16)];
        check("bias_through", &ps, |t, v| {
            let y = t.push(Op::BiasThrough { k: v[0], b: v[1] }).unwrap();
            project(t, y, 3)
        });
    }
    check("scaled_filter_kernel", &[rand_t([1, 3, 1, 1], -1.0, 1.0, 17)], |t, v| {
        let y = t.push(Op::ScaledFilterKernel { s: v[0], filter: SOBEL_X }).unwrap();
        project(t, y, 3)
    });
}

#[test]
fn clamp_away_from_the_kinks() {
    // Values in (0.05, 0.95) and (1.05, 2) avoid the non-differentiable edges.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let data: Vec<f64> = (0..32)
        .map(|i| if i % 3 == 0 { rng.gen_range(1.05..2.0) } else { rng.gen_range(0.05..0.95) })
        .collect();
    let ps = [Tensor::from_vec([1, 2, 4, 4], data).unwrap()];
    check("clamp01", &ps, |t, v| {
        let y = t.push(Op::Clamp01 { x: v[0] }).unwrap();
        project(t, y, 4)
    });
}

#[test]
fn losses() {
    let target = rand_t([2, 3, 16, 16], 0.0, 1.0, 19);
    // Keep every |pred - target| at least 0.05 so the absolute value is smooth.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let pred: Vec<f64> = target
        .data()
        .iter()
        .map(|&v| {
            let d = rng.gen_range(0.05..0.3);
            if v > 0.5 { v - d } else { v + d }
        })
        .collect();
    let ps = [Tensor::from_vec([2, 3, 16, 16], pred).unwrap(), target];
    check("mean_abs_diff", &ps, |t, v| t.push(Op::MeanAbsDiff { pred: v[0], target: v[1] }).unwrap());
    check("ssim", &ps, |t, v| t.push(Op::Ssim { pred: v[0], target: v[1] }).unwrap());
    check("loss", &ps[..1], |t, v| {
        let gt = t.constant(ps[1].clone());
        loss_tape(t, v[0], gt, 0.7).unwrap()
    });
}

#[test]
fn every_layer_mode_through_the_tape() {
    let cfg = BlockConfig::erb(3, 4);
    let block = RepBlock::<f64>::random(&cfg, &mut ChaCha8Rng::seed_from_u64(21));
    let x = rand_t([1, 3, 6, 5], -1.0, 1.0, 22);
    for mode in [RepMode::OnlineTrain, RepMode::ExplicitTrain] {
        let layer = RepLayer::train(block.clone(), mode).unwrap();
        let params: Vec<Tensor<f64>> = layer.param_tensors().into_iter().cloned().collect();
        check_built(&format!("{mode:?}"), &params, |t, ps| {
            let mut l = layer.clone();
            for (dst, src) in l.param_tensors_mut().into_iter().zip(ps) {
                *dst = src.clone();
            }
            let lv = l.register(t);
            let xv = t.constant(x.clone());
            let y = l.forward_tape(t, &lv, xv).unwrap();
            (project(t, y, 23), lv.flat())
        });
    }
}

#[test]
fn whole_model_loss() {
    let cfg = ModelConfig {
        frame_height: 12,
        frame_width: 12,
        base_height: 3,
        base_width: 3,
        factors: vec![2, 2],
        channels: vec![4, 4, 4],
        mlp_hidden: 6,
        pe_base: 1.25,
        pe_levels: 3,
        ..ModelConfig::default()
    };
    let model = RepNerv::<f64>::init(cfg, RepMode::OnlineTrain, 3).unwrap();
    let params: Vec<Tensor<f64>> = model.param_tensors().into_iter().cloned().collect();
    let gt = rand_t([2, 3, 12, 12], 0.2, 0.8, 24);
    check_built("model", &params, |t, ps| {
        let mut m = model.clone();
        for (dst, src) in m.param_tensors_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let mv = m.register(t);
        let pred = m.forward_tape(t, &mv, &[0.0, 0.5]).unwrap();
        let g = t.constant(gt.clone());
        (loss_tape(t, pred, g, 0.7).unwrap(), mv.flat())
    });
}
