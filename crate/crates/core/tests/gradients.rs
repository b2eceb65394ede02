//! Analytic gradients of a two-block network with `sign` disabled against
//! central finite differences of the batch loss.

use ecg_bnn::data::EcgSegment;
use ecg_bnn::model::{BlockConfig, Mode, NetConfig, TrainedParams};
use ecg_bnn::ops::ConvSpec;
use ecg_bnn::train::{forward_backward, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const REL_TOL: f64 = 1e-4;

fn toy_net() -> NetConfig {
    NetConfig {
        blocks: vec![
            BlockConfig {
                in_channels: 1,
                out_channels: 4,
                conv: ConvSpec::new(7, 2, 5, 1.0),
                pool_size: 3,
                pool_stride: 2,
            },
            BlockConfig {
                in_channels: 4,
                out_channels: 3,
                conv: ConvSpec::new(7, 1, 5, 1.0),
                pool_size: 3,
                pool_stride: 2,
            },
        ],
        n_classes: 3,
        mode: Mode::Bp,
        input_length: 48,
        bp_pad_value: 1.0,
    }
}

fn tensor_mut(p: &mut TrainedParams, block: usize, which: usize) -> &mut Vec<f32> {
    let b = &mut p.blocks[block];
    match which {
        0 => &mut b.weights,
        1 => &mut b.slope,
        2 => &mut b.gamma,
        _ => &mut b.beta,
    }
}

#[test]
fn analytic_matches_central_differences() {
    let net = toy_net();
    net.validate().unwrap();
    let cfg = TrainConfig {
        binarize: false,
        ..TrainConfig::for_classes(3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = TrainedParams::random(&net, &mut rng);
    let batch: Vec<EcgSegment> = (0..4)
        .map(|i| EcgSegment {
            samples: (0..48).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            label: i % 3,
        })
        .collect();
    let refs: Vec<&EcgSegment> = batch.iter().collect();
    let g = forward_backward(&p, &net, &refs, &cfg).unwrap();
    let names = ["weights", "slope", "gamma", "beta"];
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for block in 0..2 {
        for which in 0..4 {
            let analytic = match which {
                0 => &g.blocks[block].weights,
                1 => &g.blocks[block].slope,
                2 => &g.blocks[block].gamma,
                _ => &g.blocks[block].beta,
            };
            for j in 0..analytic.len() {
                let w0 = tensor_mut(&mut p, block, which)[j];
                let up = w0 + H;
                let dn = w0 - H;
                tensor_mut(&mut p, block, which)[j] = up;
                let lu = forward_backward(&p, &net, &refs, &cfg).unwrap().loss;
                tensor_mut(&mut p, block, which)[j] = dn;
                let ld = forward_backward(&p, &net, &refs, &cfg).unwrap().loss;
                tensor_mut(&mut p, block, which)[j] = w0;
                let fd = (lu - ld) / (f64::from(up) - f64::from(dn));
                let a = analytic[j];
                let scale = a.abs().max(fd.abs()).max(1e-6);
                let rel = (a - fd).abs() / scale;
                worst = worst.max(rel);
                assert!(
                    rel <= REL_TOL,
                    "block {} {}[{j}]: analytic {a:e} finite difference {fd:e} (rel {rel:e})",
                    block + 1,
                    names[which]
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 28 + 3 * 4 + 84 + 3 * 3);
    eprintln!("{checked} entries, worst relative error {worst:e}");
}
