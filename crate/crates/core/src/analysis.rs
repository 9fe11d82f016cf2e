//! Parameter and FLOP accounting.
//!
//! Conventions: a convolution costs `2·k²·C_in·C_out·H_out·W_out` FLOPs (one
//! multiply-accumulate = 2 FLOPs) plus `C_out·H_out·W_out` for its bias.
//! Pooling, upsampling, activations and additive merges cost 1 FLOP per
//! output element. Concatenation is free.

use std::fmt::Write as _;

use crate::autodiff::{ConvKernel, Element};
use crate::ldcs::{
    concat_correction, param_count_ldcs, param_count_sdcs, LdcsLayer, Merge, SdcsLayer,
};
use crate::rfcnet::{Preset, RfcConfig, RfcModel, INPUT_CHANNELS, STEM_REDUCTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Conv,
    Sdcs,
    Ldcs,
    Pool,
    Upsample,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: RowKind,
    /// Closed-form weight count, only where a closed form applies.
    pub analytic_params: Option<u64>,
    /// Weights counted by walking the layer's kernels (no biases).
    pub enumerated_params: u64,
    pub bias_params: u64,
    pub conv_flops: u64,
    /// Pooling, upsampling, activation and merge FLOPs.
    pub other_flops: u64,
    /// `d_next²/n_next` for concatenating LDCS rows, else 0.
    pub concat_correction: u64,
}

impl CostRow {
    fn new(name: impl Into<String>, kind: RowKind) -> Self {
        CostRow {
            name: name.into(),
            kind,
            analytic_params: None,
            enumerated_params: 0,
            bias_params: 0,
            conv_flops: 0,
            other_flops: 0,
            concat_correction: 0,
        }
    }

    pub fn flops(&self) -> u64 {
        self.conv_flops + self.other_flops
    }

    pub fn total_params(&self) -> u64 {
        self.enumerated_params + self.bias_params
    }

    /// Analytic matches enumeration once the concat correction is added.
    pub fn reconciles(&self) -> Option<bool> {
        self.analytic_params
            .map(|a| a + self.concat_correction == self.enumerated_params)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostTotals {
    pub analytic_params: u64,
    pub enumerated_params: u64,
    pub bias_params: u64,
    pub conv_flops: u64,
    pub other_flops: u64,
}

impl CostTotals {
    pub fn params(&self) -> u64 {
        self.enumerated_params + self.bias_params
    }

    pub fn flops(&self) -> u64 {
        self.conv_flops + self.other_flops
    }

    pub fn conv_macs(&self) -> u64 {
        self.conv_flops / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
    /// `(h, w)` used for the FLOP columns; `None` for parameter-only reports.
    pub input_dims: Option<(usize, usize)>,
    pub conventions: String,
}

pub const CONVENTIONS: &str = "1 MAC = 2 FLOPs; conv FLOPs = 2*k^2*Cin*Cout*Hout*Wout (+Cout*Hout*Wout with bias); \
pool/upsample/activation/add = 1 FLOP per output element; analytic params are bias-free closed forms";

impl CostReport {
    pub fn from_rows(rows: Vec<CostRow>, input_dims: Option<(usize, usize)>) -> Self {
        let mut totals = CostTotals::default();
        for r in &rows {
            totals.analytic_params += r.analytic_params.unwrap_or(0);
            totals.enumerated_params += r.enumerated_params;
            totals.bias_params += r.bias_params;
            totals.conv_flops += r.conv_flops;
            totals.other_flops += r.other_flops;
        }
        CostReport {
            rows,
            totals,
            input_dims,
            conventions: CONVENTIONS.to_string(),
        }
    }

    /// Aligned plain-text table followed by totals and reconciliation lines.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if let Some((h, w)) = self.input_dims {
            let _ = writeln!(out, "input: {INPUT_CHANNELS}x{h}x{w}");
        }
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>12} {:>8} {:>16} {:>12}",
            "layer", "analytic", "enumerated", "bias", "conv_flops", "other_flops"
        );
        for r in &self.rows {
            let analytic = r.analytic_params.map_or("-".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{:<18} {:>12} {:>12} {:>8} {:>16} {:>12}",
                r.name, analytic, r.enumerated_params, r.bias_params, r.conv_flops, r.other_flops
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>12} {:>8} {:>16} {:>12}",
            "total",
            t.analytic_params,
            t.enumerated_params,
            t.bias_params,
            t.conv_flops,
            t.other_flops
        );
        let _ = writeln!(
            out,
            "params: {} ({:.4}M incl. bias)",
            t.params(),
            t.params() as f64 / 1e6
        );
        let _ = writeln!(
            out,
            "flops: {} ({:.4} GFLOPs), conv MACs: {} ({:.4} GMACs)",
            t.flops(),
            t.flops() as f64 / 1e9,
            t.conv_macs(),
            t.conv_macs() as f64 / 1e9
        );
        for r in self.rows.iter().filter(|r| r.analytic_params.is_some()) {
            let a = r.analytic_params.unwrap_or(0);
            if r.concat_correction > 0 {
                let _ =
                    writeln!(
                    out,
                    "reconcile {}: analytic {} + concat correction {} = {} vs enumerated {} [{}]",
                    r.name,
                    a,
                    r.concat_correction,
                    a + r.concat_correction,
                    r.enumerated_params,
                    if r.reconciles() == Some(true) { "ok" } else { "MISMATCH" }
                );
            } else {
                let _ = writeln!(
                    out,
                    "reconcile {}: analytic {} vs enumerated {} [{}]",
                    r.name,
                    a,
                    r.enumerated_params,
                    if r.reconciles() == Some(true) {
                        "ok"
                    } else {
                        "MISMATCH"
                    }
                );
            }
        }
        let _ = writeln!(out, "conventions: {}", self.conventions);
        out
    }

    /// One CSV row per layer plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,analytic_params,enumerated_params,bias_params,conv_flops,other_flops\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{},{},{},{},{}",
                r.name,
                r.kind,
                r.analytic_params.map_or(String::new(), |a| a.to_string()),
                r.enumerated_params,
                r.bias_params,
                r.conv_flops,
                r.other_flops
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "total,,{},{},{},{},{}",
            t.analytic_params, t.enumerated_params, t.bias_params, t.conv_flops, t.other_flops
        );
        out
    }
}

/// FLOPs of one convolution producing `out_h × out_w`.
pub fn conv_flops(c_in: u64, c_out: u64, k: u64, out_h: u64, out_w: u64, bias: bool) -> u64 {
    let pixels = out_h * out_w;
    2 * k * k * c_in * c_out * pixels + if bias { c_out * pixels } else { 0 }
}

fn kernel_flops<T: Element>(k: &ConvKernel<T>, h: usize, w: usize) -> u64 {
    conv_flops(
        k.in_channels() as u64,
        k.out_channels() as u64,
        k.kernel_size() as u64,
        h as u64,
        w as u64,
        k.bias.is_some(),
    )
}

fn bias_count<T: Element>(k: &ConvKernel<T>) -> u64 {
    k.num_params(true) - k.num_params(false)
}

/// Anything that can describe its own cost for an input of spatial size
/// `h × w`.
pub trait Costed {
    fn cost_rows(&self, h: usize, w: usize) -> Vec<CostRow>;
}

impl<C: Costed> Costed for [C] {
    fn cost_rows(&self, h: usize, w: usize) -> Vec<CostRow> {
        self.iter().flat_map(|c| c.cost_rows(h, w)).collect()
    }
}

impl<T: Element> Costed for SdcsLayer<T> {
    fn cost_rows(&self, h: usize, w: usize) -> Vec<CostRow> {
        let mut r = CostRow::new("sdcs", RowKind::Sdcs);
        let (d_l, d_next) = (
            self.strong.in_channels() as u64,
            self.strong.out_channels() as u64,
        );
        r.analytic_params = Some(param_count_sdcs(
            d_l,
            d_next,
            self.strong.kernel_size() as u64,
        ));
        r.enumerated_params = self.strong.num_params(false) + self.fuse.num_params(false);
        r.bias_params = bias_count(&self.strong) + bias_count(&self.fuse);
        r.conv_flops = kernel_flops(&self.strong, h, w) + kernel_flops(&self.fuse, h, w);
        r.other_flops = 2 * d_next * (h * w) as u64;
        vec![r]
    }
}

impl<T: Element> Costed for LdcsLayer<T> {
    fn cost_rows(&self, h: usize, w: usize) -> Vec<CostRow> {
        let mut r = CostRow::new("ldcs", RowKind::Ldcs);
        r.analytic_params = param_count_ldcs(&self.spec).ok();
        r.concat_correction = concat_correction(&self.spec);
        let c = self.spec.out_group_width() as u64;
        let pixels = (h * w) as u64;
        for g in &self.groups {
            let mut kernels = vec![&g.strong, &g.fuse];
            kernels.extend(g.loose.iter());
            for k in kernels {
                r.enumerated_params += k.num_params(false);
                r.bias_params += bias_count(k);
                r.conv_flops += kernel_flops(k, h, w);
            }
            // relu after strong and fuse, plus relu and merge for loose
            let mut elementwise = 2;
            if g.loose.is_some() {
                elementwise += 1;
                if self.spec.merge == Merge::Add {
                    elementwise += 1;
                }
            }
            r.other_flops += elementwise * c * pixels;
        }
        vec![r]
    }
}

impl<T: Element> Costed for RfcModel<T> {
    fn cost_rows(&self, h: usize, w: usize) -> Vec<CostRow> {
        let mut rows = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for (i, k) in self.stem.iter().enumerate() {
            let mut conv = CostRow::new(format!("stem.conv{}", i + 1), RowKind::Conv);
            conv.enumerated_params = k.num_params(false);
            conv.bias_params = bias_count(k);
            conv.conv_flops = kernel_flops(k, ch, cw);
            conv.other_flops = (k.out_channels() * ch * cw) as u64;
            rows.push(conv);
            ch /= 2;
            cw /= 2;
            let mut pool = CostRow::new(format!("stem.pool{}", i + 1), RowKind::Pool);
            pool.other_flops = (k.out_channels() * ch * cw) as u64;
            rows.push(pool);
        }
        for (l, layer) in self.tree.iter().enumerate() {
            for mut r in layer.cost_rows(ch, cw) {
                r.name = format!("tree{l}");
                rows.push(r);
            }
        }
        let mut head = CostRow::new("head.conv", RowKind::Conv);
        head.enumerated_params = self.head.num_params(false);
        head.bias_params = bias_count(&self.head);
        head.conv_flops = kernel_flops(&self.head, ch, cw);
        rows.push(head);
        let mut up = CostRow::new("head.upsample", RowKind::Upsample);
        up.other_flops =
            (self.config.num_classes * ch * STEM_REDUCTION * cw * STEM_REDUCTION) as u64;
        rows.push(up);
        rows
    }
}

pub fn count_flops<C: Costed + ?Sized>(model: &C, h: usize, w: usize) -> CostReport {
    CostReport::from_rows(model.cost_rows(h, w), Some((h, w)))
}

/// Parameter-only report; FLOP columns are zero.
pub fn count_params<C: Costed + ?Sized>(model: &C) -> CostReport {
    CostReport::from_rows(model.cost_rows(0, 0), None)
}

/// Weight count of a strongly connected tree with the same channel schedule
/// (`w·m^l` channels at level `l`) and the smallest of the config's kernels.
pub fn sdcs_tree_params(config: &RfcConfig) -> u64 {
    let k = *config.kernels.iter().min().expect("validated config") as u64;
    (0..config.depth as u32)
        .map(|l| {
            let d_l = (config.width * config.m.pow(l)) as u64;
            param_count_sdcs(d_l, d_l * config.m as u64, k)
        })
        .sum()
}

/// Computation and accuracy figures published for a preset, at 224×224.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedFigures {
    pub params_millions: f64,
    pub gflops: f64,
    pub miou_kvasir: f64,
    pub miou_glas: f64,
    pub miou_cvc: f64,
}

pub fn published_figures(p: Preset) -> PublishedFigures {
    let (params_millions, gflops, miou_kvasir, miou_glas, miou_cvc) = match p {
        Preset::A => (5.76, 18.13, 81.31, 77.88, 85.90),
        Preset::B => (4.49, 14.03, 79.15, 75.34, 83.34),
        Preset::C => (0.39, 1.27, 76.41, 75.49, 79.51),
        Preset::D => (0.28, 0.91, 73.24, 66.17, 77.68),
    };
    PublishedFigures {
        params_millions,
        gflops,
        miou_kvasir,
        miou_glas,
        miou_cvc,
    }
}

/// Clearly labeled comparison of this build's figures against the published
/// ones, with the reason they are not expected to match.
pub fn reference_note(preset: Preset, report: &CostReport) -> String {
    let pubd = published_figures(preset);
    let t = &report.totals;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "== published reference figures (preset {preset}) vs this build =="
    );
    let _ = writeln!(
        out,
        "this build:           params {:.2}M, {:.2} GFLOPs ({:.2} GMACs)",
        t.params() as f64 / 1e6,
        t.flops() as f64 / 1e9,
        t.conv_macs() as f64 / 1e9
    );
    let _ = writeln!(
        out,
        "published (224x224):  params {:.2}M, {:.2} GFLOPs; mIoU % Kvasir {:.2}, GlaS {:.2}, CVC-ClinicDB {:.2}",
        pubd.params_millions, pubd.gflops, pubd.miou_kvasir, pubd.miou_glas, pubd.miou_cvc
    );
    let _ = writeln!(
        out,
        "NOT REPRODUCED: the published params/GFLOPs depend on channel widths, tree depth, stem and head \
         that were never published, and the mIoU columns require GPU-scale training on the real datasets. \
         Figures above for this build use the documented defaults."
    );
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetComparison {
    pub preset: Preset,
    pub params: u64,
    pub flops: u64,
    pub conv_flops: u64,
    pub published: PublishedFigures,
}

/// One row per preset, each built from `base` with only `m` and the kernel
/// list replaced.
pub fn compare_presets(
    presets: &[Preset],
    base: &RfcConfig,
    h: usize,
    w: usize,
) -> crate::Result<Vec<PresetComparison>> {
    presets
        .iter()
        .map(|&p| {
            let cfg = RfcConfig {
                m: p.m(),
                kernels: p.kernels().to_vec(),
                ..base.clone()
            };
            let model = RfcModel::<f32>::build(&cfg)?;
            let report = count_flops(&model, h, w);
            Ok(PresetComparison {
                preset: p,
                params: report.totals.params(),
                flops: report.totals.flops(),
                conv_flops: report.totals.conv_flops,
                published: published_figures(p),
            })
        })
        .collect()
}

pub fn render_comparison(rows: &[PresetComparison]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<7} {:>12} {:>10} {:>14} {:>14}",
        "preset", "params", "GFLOPs", "pub. params", "pub. GFLOPs"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<7} {:>11.2}M {:>10.2} {:>13.2}M {:>14.2}",
            r.preset.to_string(),
            r.params as f64 / 1e6,
            r.flops as f64 / 1e9,
            r.published.params_millions,
            r.published.gflops
        );
    }
    out
}
