//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Compressed costs are polynomials in the rank `r`: parameters are
//! `params_r2 * r^2`, and one forward pass over a batch of `B` costs
//! `macs_r3 * r^3 + macs_r2 * r^2`. The `r^3` part holds the balanced-plan
//! merges of the channel cores (and the `D x D` spatial step for convs); the
//! `r^2` part holds the batch-proportional contractions. Counts are MACs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{ArchSpec, LayerKind, LayerSpec, Unit};
use crate::error::Result;
use crate::layers::{chain_merge_coeff, SpatialMode};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub kind: Option<LayerKind>,
    pub repeat: usize,
    pub params_uncompressed: u64,
    pub bias_params: u64,
    pub params_r2: u64,
    pub macs_uncompressed: u64,
    pub macs_r3: u64,
    pub macs_r2: u64,
    pub rank: usize,
    pub batch: usize,
    pub params_tr: u64,
    pub macs_tr: u64,
    /// `params_uncompressed / (params_r2 r^2)`.
    pub p_ratio: f64,
    /// Closed-form computation saving: `2BIO / ((4r^3 + 2Br^2)(I + O))` for
    /// fully-connected units, `BIOD^2 / (4r^3(I+O) + Br^2(I+O) + Br^3 D^2)`
    /// for convolutions, summed over units.
    pub c_bound: f64,
    /// `macs_uncompressed / macs_tr`.
    pub c_ratio: f64,
    /// Differences against the row's `reference` coefficients.
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    params: u64,
    bias: u64,
    params_r2: u64,
    macs: u64,
    macs_r3: u64,
    macs_r2: u64,
    c_num: f64,
    c_den: f64,
}

impl Tally {
    fn add(&mut self, o: &Tally, times: u64) {
        self.params += o.params * times;
        self.bias += o.bias * times;
        self.params_r2 += o.params_r2 * times;
        self.macs += o.macs * times;
        self.macs_r3 += o.macs_r3 * times;
        self.macs_r2 += o.macs_r2 * times;
        self.c_num += o.c_num * times as f64;
        self.c_den += o.c_den * times as f64;
    }
}

fn unit_tally(unit: &Unit, rank: usize, batch: usize) -> Result<Tally> {
    let (r, b) = (rank as f64, batch as u64);
    Ok(match unit {
        Unit::Fc {
            in_shape,
            out_shape,
            bias,
        } => {
            let i: u64 = in_shape.iter().product::<usize>() as u64;
            let o: u64 = out_shape.iter().product::<usize>() as u64;
            let modes: usize = in_shape.iter().chain(out_shape).sum();
            Tally {
                params: i * o,
                bias: if *bias { o } else { 0 },
                params_r2: modes as u64,
                macs: b * i * o,
                macs_r3: chain_merge_coeff(in_shape) + chain_merge_coeff(out_shape),
                macs_r2: b * (i + o),
                c_num: 2.0 * (b * i * o) as f64,
                c_den: (4.0 * r.powi(3) + 2.0 * b as f64 * r * r) * (i + o) as f64,
            }
        }
        Unit::Conv {
            spec,
            mode,
            in_shape,
            out_shape,
            bias,
            ..
        } => {
            let (ho, wo) = spec.output_hw()?;
            let (i, o) = (spec.in_channels as u64, spec.out_channels as u64);
            let dd = (spec.filter * spec.filter) as u64;
            let hw = (spec.height * spec.width) as u64;
            let howo = (ho * wo) as u64;
            let spatial_params: usize = mode.mode_sizes(spec.filter).iter().sum();
            let spatial_merge = match mode {
                SpatialMode::Merged => 0,
                SpatialMode::Split => dd,
            };
            let channel_modes: usize = in_shape.iter().chain(out_shape).sum();
            let bf = b as f64;
            Tally {
                params: dd * i * o,
                bias: if *bias { o } else { 0 },
                params_r2: (spatial_params + channel_modes) as u64,
                macs: b * howo * dd * i * o,
                macs_r3: spatial_merge + chain_merge_coeff(in_shape) + chain_merge_coeff(out_shape) + b * howo * dd,
                macs_r2: b * (hw * i + howo * o),
                c_num: bf * (i * o * dd) as f64,
                c_den: 4.0 * r.powi(3) * (i + o) as f64 + bf * r * r * (i + o) as f64 + bf * r.powi(3) * dd as f64,
            }
        }
    })
}

fn finish(name: String, kind: Option<LayerKind>, repeat: usize, t: &Tally, rank: usize, batch: usize) -> CostReport {
    let r2 = (rank * rank) as u64;
    let params_tr = t.params_r2 * r2;
    let macs_tr = t.macs_r3 * r2 * rank as u64 + t.macs_r2 * r2;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CostReport {
        name,
        kind,
        repeat,
        params_uncompressed: t.params,
        bias_params: t.bias,
        params_r2: t.params_r2,
        macs_uncompressed: t.macs,
        macs_r3: t.macs_r3,
        macs_r2: t.macs_r2,
        rank,
        batch,
        params_tr,
        macs_tr,
        p_ratio: ratio(t.params, params_tr),
        c_bound: if t.c_den == 0.0 { 0.0 } else { t.c_num / t.c_den },
        c_ratio: ratio(t.macs, macs_tr),
        flags: Vec::new(),
    }
}

fn row_tally(layer: &LayerSpec, rank: usize, batch: usize) -> Result<Tally> {
    let mut t = Tally::default();
    for unit in layer.units()? {
        t.add(&unit_tally(&unit, rank, batch)?, layer.repeat as u64);
    }
    Ok(t)
}

/// Cost of one architecture row (all of its units and repeats).
pub fn layer_cost(layer: &LayerSpec, index: usize, rank: usize, batch: usize) -> Result<CostReport> {
    let t = row_tally(layer, rank, batch)?;
    let mut report = finish(layer.label(index), Some(layer.kind), layer.repeat, &t, rank, batch);
    if let Some(reference) = &layer.reference {
        for (what, want, got) in [
            ("params_r2", reference.params_r2, report.params_r2),
            ("macs_r3", reference.macs_r3, report.macs_r3),
            ("macs_r2", reference.macs_r2, report.macs_r2),
        ] {
            if let Some(want) = want {
                if want != got {
                    report.flags.push(format!("{what}: derived {got}, reference {want}"));
                }
            }
        }
    }
    Ok(report)
}

/// Single fully-connected unit.
pub fn fc_cost(in_shape: &[usize], out_shape: &[usize], rank: usize, batch: usize) -> Result<CostReport> {
    let unit = Unit::Fc {
        in_shape: in_shape.to_vec(),
        out_shape: out_shape.to_vec(),
        bias: false,
    };
    Ok(finish(
        "fc".into(),
        Some(LayerKind::Fc),
        1,
        &unit_tally(&unit, rank, batch)?,
        rank,
        batch,
    ))
}

/// Single convolution unit.
pub fn conv_cost(
    spec: crate::tensor::ConvSpec,
    mode: SpatialMode,
    in_shape: &[usize],
    out_shape: &[usize],
    rank: usize,
    batch: usize,
) -> Result<CostReport> {
    let unit = Unit::Conv {
        spec,
        mode,
        in_shape: in_shape.to_vec(),
        out_shape: out_shape.to_vec(),
        bias: false,
        pool: false,
    };
    Ok(finish(
        "conv".into(),
        Some(LayerKind::Conv),
        1,
        &unit_tally(&unit, rank, batch)?,
        rank,
        batch,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct ArchCost {
    pub name: String,
    pub rank: usize,
    pub batch: usize,
    pub rows: Vec<CostReport>,
    pub total: CostReport,
}

pub fn arch_cost(arch: &ArchSpec, rank: usize, batch: usize) -> Result<ArchCost> {
    let mut rows = Vec::new();
    let mut sum = Tally::default();
    for (i, layer) in arch.layers.iter().enumerate() {
        rows.push(layer_cost(layer, i, rank, batch)?);
        sum.add(&row_tally(layer, rank, batch)?, 1);
    }
    let total = finish("total".into(), None, 1, &sum, rank, batch);
    Ok(ArchCost {
        name: arch.name.clone(),
        rank,
        batch,
        rows,
        total,
    })
}

/// `"1177 r^3 + 1084 r^2"`, dropping a zero `r^3` term.
pub fn poly(r3: u64, r2: u64) -> String {
    if r3 == 0 {
        format!("{r2} r^2")
    } else {
        format!("{r3} r^3 + {r2} r^2")
    }
}

fn kind_name(kind: Option<LayerKind>) -> &'static str {
    match kind {
        Some(LayerKind::Fc) => "fc",
        Some(LayerKind::Conv) => "conv",
        Some(LayerKind::Resblock) => "resblock",
        None => "-",
    }
}

impl ArchCost {
    /// Aligned table. Symbolic mode prints coefficients of `r^2` / `r^3`
    /// instead of values at the configured rank.
    pub fn to_text(&self, symbolic: bool) -> String {
        let header = [
            "layer",
            "kind",
            "repeat",
            "params",
            "tr_params",
            "macs",
            "tr_macs",
            "P",
            "C_bound",
            "C",
        ];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let (tp, tm) = if symbolic {
                (poly(0, row.params_r2), poly(row.macs_r3, row.macs_r2))
            } else {
                (row.params_tr.to_string(), row.macs_tr.to_string())
            };
            table.push(vec![
                row.name.clone(),
                kind_name(row.kind).into(),
                row.repeat.to_string(),
                row.params_uncompressed.to_string(),
                tp,
                row.macs_uncompressed.to_string(),
                tm,
                format!("{:.3}", row.p_ratio),
                format!("{:.3}", row.c_bound),
                format!("{:.3}", row.c_ratio),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("# {} (r = {}, B = {})\n", self.name, self.rank, self.batch);
        for r in &table {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        for row in &self.rows {
            for f in &row.flags {
                let _ = writeln!(out, "! {}: {f}", row.name);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,repeat,params_uncompressed,bias_params,params_r2,macs_uncompressed,macs_r3,macs_r2,rank,batch,params_tr,macs_tr,p_ratio,c_bound,c_ratio,flags\n",
        );
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}",
                row.name,
                kind_name(row.kind),
                row.repeat,
                row.params_uncompressed,
                row.bias_params,
                row.params_r2,
                row.macs_uncompressed,
                row.macs_r3,
                row.macs_r2,
                row.rank,
                row.batch,
                row.params_tr,
                row.macs_tr,
                row.p_ratio,
                row.c_bound,
                row.c_ratio,
                row.flags.join("; ")
            );
        }
        out
    }
}
