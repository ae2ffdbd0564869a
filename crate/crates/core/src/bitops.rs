//! BitOPs accounting and the budget penalty.
//!
//! Only matrix products are counted: a product with `macs` multiply-adds
//! whose operands are held at `b_a` and `b_b` bits costs `macs · b_a · b_b`.
//! Softmax, LayerNorm, residual and bias additions are free. Counts are per
//! image.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::quant::{MAX_BIT, MIN_BIT};
use crate::vit::{Forward, ModelConfig, VitError};

#[derive(Debug, Error)]
pub enum BitOpsError {
    #[error("allocation has no entry for quantizer {0}")]
    MissingAllocation(String),
    #[error("bit {bit} for {name} outside [2, 8]")]
    BitOutOfRange { name: String, bit: i64 },
    #[error("allocation csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("allocation csv is missing column {0}")]
    MissingColumn(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Discrete bit per quantizer name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitAllocation(BTreeMap<String, u8>);

impl BitAllocation {
    pub fn insert(&mut self, name: &str, bit: u8) {
        self.0.insert(name.to_string(), bit);
    }

    pub fn get(&self, name: &str) -> Option<u8> {
        self.0.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u8)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `bits` everywhere except 8 on the patch embedding and classifier.
    pub fn uniform(config: &ModelConfig, bits: u8) -> Self {
        let mut out = Self::default();
        for spec in config.quantizer_specs() {
            out.insert(&spec.name, if spec.is_boundary() { MAX_BIT } else { bits });
        }
        out
    }
}

/// One counted matrix product and the two quantizers feeding it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatmulEntry {
    pub name: String,
    pub macs: u64,
    pub operand_a: String,
    pub operand_b: String,
}

/// Every counted product of `config`, in model order.
pub fn matmul_entries(config: &ModelConfig) -> Vec<MatmulEntry> {
    let n = config.tokens() as u64;
    let d = config.embed_dim as u64;
    let dh = config.head_dim() as u64;
    let dm = config.mlp_dim as u64;
    let entry = |name: String, macs: u64, a: String, b: String| MatmulEntry {
        name,
        macs,
        operand_a: a,
        operand_b: b,
    };
    let mut out = vec![entry(
        "patch_embed".into(),
        config.num_patches() as u64 * d * config.patch_dim() as u64,
        "patch_embed.x".into(),
        "patch_embed.w".into(),
    )];
    for l in 0..config.depth {
        let p = format!("block{l}");
        for i in 0..config.heads {
            for which in ["q", "k", "v"] {
                out.push(entry(
                    format!("{p}.msa.head{i}.proj_{which}"),
                    n * d * dh,
                    format!("{p}.msa.x_in"),
                    format!("{p}.msa.w_{which}.head{i}"),
                ));
            }
            out.push(entry(
                format!("{p}.msa.head{i}.qk"),
                n * n * dh,
                format!("{p}.msa.head{i}.q"),
                format!("{p}.msa.head{i}.k"),
            ));
            out.push(entry(
                format!("{p}.msa.head{i}.av"),
                n * n * dh,
                format!("{p}.msa.head{i}.attn"),
                format!("{p}.msa.head{i}.v"),
            ));
            out.push(entry(
                format!("{p}.msa.head{i}.proj_o"),
                n * dh * d,
                format!("{p}.msa.head{i}.out"),
                format!("{p}.msa.w_o.head{i}"),
            ));
        }
        out.push(entry(format!("{p}.mlp.fc1"), n * d * dm, format!("{p}.mlp.x_in"), format!("{p}.mlp.w1")));
        out.push(entry(format!("{p}.mlp.fc2"), n * dm * d, format!("{p}.mlp.gelu"), format!("{p}.mlp.w2")));
    }
    out.push(entry(
        "classifier".into(),
        d * config.num_classes as u64,
        "classifier.x".into(),
        "classifier.w".into(),
    ));
    out
}

pub fn matmul_bitops(macs: u64, bits_a: f64, bits_b: f64) -> f64 {
    macs as f64 * bits_a * bits_b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitOpsEntry {
    pub name: String,
    pub macs: u64,
    pub bits_a: f64,
    pub bits_b: f64,
    pub bitops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitOpsReport {
    pub entries: Vec<BitOpsEntry>,
    pub total: f64,
    pub budget: Option<f64>,
    pub over_budget: Option<bool>,
}

impl BitOpsReport {
    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = Some(budget);
        self.over_budget = Some(self.total > budget);
        self
    }

    pub fn total_giga(&self) -> f64 {
        self.total / 1e9
    }

    /// Columns: `name,macs,bits_a,bits_b,bitops`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BitOpsError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["name", "macs", "bits_a", "bits_b", "bitops"])?;
        for e in &self.entries {
            wtr.write_record([
                e.name.clone(),
                e.macs.to_string(),
                e.bits_a.to_string(),
                e.bits_b.to_string(),
                e.bitops.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn report_with(
    config: &ModelConfig,
    bit: impl Fn(&str) -> Result<f64, BitOpsError>,
) -> Result<BitOpsReport, BitOpsError> {
    let mut entries = Vec::new();
    let mut total = 0.0;
    for m in matmul_entries(config) {
        let bits_a = bit(&m.operand_a)?;
        let bits_b = bit(&m.operand_b)?;
        let bitops = matmul_bitops(m.macs, bits_a, bits_b);
        total += bitops;
        entries.push(BitOpsEntry {
            name: m.name,
            macs: m.macs,
            bits_a,
            bits_b,
            bitops,
        });
    }
    Ok(BitOpsReport {
        entries,
        total,
        budget: None,
        over_budget: None,
    })
}

/// BitOPs with discrete bits from `alloc`.
pub fn model_bitops(config: &ModelConfig, alloc: &BitAllocation) -> Result<BitOpsReport, BitOpsError> {
    report_with(config, |name| {
        let b = alloc
            .get(name)
            .ok_or_else(|| BitOpsError::MissingAllocation(name.to_string()))?;
        if !(MIN_BIT..=MAX_BIT).contains(&b) {
            return Err(BitOpsError::BitOutOfRange {
                name: name.to_string(),
                bit: b as i64,
            });
        }
        Ok(b as f64)
    })
}

/// BitOPs with `clamp(b_tilde, 2, 8)` in place of discrete bits.
pub fn model_bitops_continuous(
    config: &ModelConfig,
    b_tilde: &BTreeMap<String, f64>,
) -> Result<BitOpsReport, BitOpsError> {
    report_with(config, |name| {
        b_tilde
            .get(name)
            .map(|b| b.clamp(MIN_BIT as f64, MAX_BIT as f64))
            .ok_or_else(|| BitOpsError::MissingAllocation(name.to_string()))
    })
}

/// Budget `c` of an `N`-bit constraint: interior `N × N`, first/last `8 × 8`.
pub fn uniform_budget(config: &ModelConfig, bits: u8) -> f64 {
    model_bitops(config, &BitAllocation::uniform(config, bits))
        .expect("uniform allocation covers every quantizer")
        .total
}

/// `eta · H(C - c)²` with `H(z) = max(z, 0)`.
pub fn penalty(tape: &mut Tape, cost: Var, budget: f64, eta: f64) -> Result<Var, AutodiffError> {
    let over = tape.add_scalar(cost, -budget)?;
    let hinge = tape.relu(over)?;
    let sq = tape.mul(hinge, hinge)?;
    tape.mul_scalar(sq, eta)
}

/// Matmul entries resolved to quantizer indices of a model, with MACs
/// pre-divided by `unit`.
#[derive(Clone, Debug)]
pub struct CostModel {
    terms: Vec<(usize, usize, f64)>,
    pub unit: f64,
}

impl CostModel {
    pub fn new(model: &crate::vit::Vit, unit: f64) -> Result<Self, VitError> {
        let terms = matmul_entries(&model.config)
            .into_iter()
            .map(|m| {
                let a = model
                    .quantizer_index(&m.operand_a)
                    .ok_or_else(|| VitError::UnknownQuantizer(m.operand_a.clone()))?;
                let b = model
                    .quantizer_index(&m.operand_b)
                    .ok_or_else(|| VitError::UnknownQuantizer(m.operand_b.clone()))?;
                Ok((a, b, m.macs as f64 / unit))
            })
            .collect::<Result<Vec<_>, VitError>>()?;
        Ok(Self { terms, unit })
    }

    /// Differentiable continuous BitOPs (in units of `self.unit`) on `fwd`'s tape.
    pub fn record(&self, fwd: &mut Forward) -> Result<Var, VitError> {
        let mut bits = BTreeMap::new();
        let mut acc: Option<Var> = None;
        for &(a, b, scaled_macs) in &self.terms {
            let mut bit = |fwd: &mut Forward, i: usize| -> Result<Var, VitError> {
                if let Some(&v) = bits.get(&i) {
                    return Ok(v);
                }
                let v = fwd.continuous_bit(i)?;
                bits.insert(i, v);
                Ok(v)
            };
            let ba = bit(fwd, a)?;
            let bb = bit(fwd, b)?;
            let prod = fwd.tape.mul(ba, bb)?;
            let term = fwd.tape.mul_scalar(prod, scaled_macs)?;
            acc = Some(match acc {
                Some(s) => fwd.tape.add(s, term)?,
                None => term,
            });
        }
        Ok(acc.expect("a model has at least the patch embedding"))
    }
}

/// Allocation snapshot CSV. Columns: `quantizer,layer,head,role,bit`;
/// `layer`/`head` are empty where not applicable.
pub fn write_allocation_csv<W: Write>(
    config: &ModelConfig,
    alloc: &BitAllocation,
    w: W,
) -> Result<(), BitOpsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["quantizer", "layer", "head", "role", "bit"])?;
    for spec in config.quantizer_specs() {
        let bit = alloc
            .get(&spec.name)
            .ok_or_else(|| BitOpsError::MissingAllocation(spec.name.clone()))?;
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([
            spec.name.clone(),
            opt(spec.layer),
            opt(spec.head),
            spec.role.as_str().to_string(),
            bit.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the `quantizer` and `bit` columns of an allocation CSV.
pub fn read_allocation_csv<R: Read>(r: R) -> Result<BitAllocation, BitOpsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(BitOpsError::MissingColumn(name))
    };
    let (qc, bc) = (col("quantizer")?, col("bit")?);
    let mut alloc = BitAllocation::default();
    for rec in rdr.records() {
        let rec = rec?;
        let name = rec.get(qc).unwrap_or_default();
        let raw = rec.get(bc).unwrap_or_default();
        let bit: i64 = raw.trim().parse().map_err(|_| BitOpsError::BitOutOfRange {
            name: name.to_string(),
            bit: -1,
        })?;
        if !(MIN_BIT as i64..=MAX_BIT as i64).contains(&bit) {
            return Err(BitOpsError::BitOutOfRange {
                name: name.to_string(),
                bit,
            });
        }
        alloc.insert(name, bit as u8);
    }
    Ok(alloc)
}

/// Bit statistics of one role within one layer (`layer` is `None` for the
/// patch embedding and classifier).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer: Option<usize>,
    pub role: String,
    pub count: usize,
    pub min: u8,
    pub median: f64,
    pub max: u8,
    pub mean: f64,
}

/// Per-layer, per-role bit statistics, in model order of first appearance.
pub fn allocation_summary(config: &ModelConfig, alloc: &BitAllocation) -> Result<Vec<SummaryRow>, BitOpsError> {
    let mut groups: Vec<((Option<usize>, &'static str), Vec<u8>)> = Vec::new();
    for spec in config.quantizer_specs() {
        let bit = alloc
            .get(&spec.name)
            .ok_or_else(|| BitOpsError::MissingAllocation(spec.name.clone()))?;
        let key = (spec.layer, spec.role.as_str());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, bits)) => bits.push(bit),
            None => groups.push((key, vec![bit])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|((layer, role), mut bits)| {
            bits.sort_unstable();
            let n = bits.len();
            let median = if n % 2 == 1 {
                bits[n / 2] as f64
            } else {
                (bits[n / 2 - 1] as f64 + bits[n / 2] as f64) / 2.0
            };
            SummaryRow {
                layer,
                role: role.to_string(),
                count: n,
                min: bits[0],
                median,
                max: bits[n - 1],
                mean: bits.iter().map(|&b| b as f64).sum::<f64>() / n as f64,
            }
        })
        .collect())
}

/// Columns: `layer,role,count,min,median,max,mean`.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), BitOpsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["layer", "role", "count", "min", "median", "max", "mean"])?;
    for r in rows {
        wtr.write_record([
            r.layer.map(|l| l.to_string()).unwrap_or_default(),
            r.role.clone(),
            r.count.to_string(),
            r.min.to_string(),
            r.median.to_string(),
            r.max.to_string(),
            r.mean.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
