#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rfcnet::autodiff::Buffer;
use rfcnet::ldcs::{LdcsLayer, LdcsLayerSpec, Merge};

/// Plain nested-vector feature map: `[channel][y][x]`.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(b: &Buffer<f64>) -> Map {
    let s = b.shape();
    (0..s.c)
        .map(|c| {
            (0..s.h)
                .map(|y| (0..s.w).map(|x| b.at(0, c, y, x)).collect())
                .collect()
        })
        .collect()
}

/// Same-padded, stride-1 cross-correlation followed by ReLU.
pub fn conv_relu(x: &Map, w: &Buffer<f64>, b: Option<&Buffer<f64>>) -> Map {
    let ws = w.shape();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (ws.h / 2) as isize;
    let mut out = vec![vec![vec![0.0; wd]; h]; ws.n];
    for (co, plane) in out.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for (ci, xc) in x.iter().enumerate() {
                    for ky in 0..ws.h {
                        for kx in 0..ws.w {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += xc[iy as usize][ix as usize] * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                }
                *v = acc.max(0.0);
            }
        }
    }
    out
}

/// Direct transcription of the layer:
/// `out_i = F1(merge(Fk(x_parent(i)), F1(concat_{j != parent(i)} x_j)))`,
/// every convolution followed by ReLU.
pub fn ldcs_oracle(layer: &LdcsLayer<f64>, inputs: &[Map]) -> Vec<Map> {
    let bias = |k: &rfcnet::autodiff::ConvKernel<f64>| k.bias.as_ref().map(|b| b.value().clone());
    let mut outs = Vec::new();
    for (path, &p) in layer.groups.iter().zip(&layer.parents) {
        let strong = conv_relu(
            &inputs[p],
            &path.strong.weight.value(),
            bias(&path.strong).as_ref(),
        );
        let merged = match &path.loose {
            None => strong,
            Some(loose) => {
                let others: Map = inputs
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != p)
                    .flat_map(|(_, m)| m.clone())
                    .collect();
                let mixed = conv_relu(&others, &loose.weight.value(), bias(loose).as_ref());
                match layer.spec.merge {
                    Merge::Concat => strong.into_iter().chain(mixed).collect(),
                    Merge::Add => strong
                        .iter()
                        .zip(&mixed)
                        .map(|(a, b)| {
                            a.iter()
                                .zip(b)
                                .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u + v).collect())
                                .collect()
                        })
                        .collect(),
                }
            }
        };
        outs.push(conv_relu(
            &merged,
            &path.fuse.weight.value(),
            bias(&path.fuse).as_ref(),
        ));
    }
    outs
}

pub fn random_spec(rng: &mut ChaCha8Rng, merge: Merge) -> LdcsLayerSpec {
    let n_l = rng.gen_range(1..5);
    let n_next = n_l * rng.gen_range(1..4);
    let d_l = n_l * rng.gen_range(1..9);
    let d_next = n_next * rng.gen_range(1..9);
    let kernels = (0..n_next)
        .map(|_| [3, 5, 7][rng.gen_range(0..3)])
        .collect();
    LdcsLayerSpec {
        d_l,
        n_l,
        d_next,
        n_next,
        kernels,
        merge,
        include_bias: false,
    }
}
