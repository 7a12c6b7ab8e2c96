//! Synthetic Gaussian-cluster domains and shifted target streams.
//!
//! A [`DomainSpec`] describes `K` isotropic Gaussian classes in `R^D`. The
//! source dataset is drawn from it directly; target samples are drawn from
//! it and then pushed through a [`ShiftSpec`] (Givens rotation in a seeded
//! 2-plane, translation, scaling, additive noise). Every generator is a
//! pure function of its seeds.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, DenseMatrix};

// independent RNG streams derived from one seed
const STREAM_SOURCE: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_ROTATION_PLANE: u64 = 5;
const STREAM_NOISE_BASE: u64 = 1 << 32;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class-conditional Gaussian domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic per-class standard deviation.
    pub class_std: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub seed: u64,
}

/// Default geometry of [`DomainSpec::gaussian`] used by the benchmark.
pub const BENCH_OFFSET: f64 = 0.95;
pub const BENCH_SEPARATION: f64 = 1.0;
pub const BENCH_CLASS_STD: f64 = 0.35;

impl DomainSpec {
    /// Seeded Gaussian classes sharing a common offset `offset·u₀` from the
    /// origin. Two classes sit at `offset·u₀ ± separation·u₁`; with `K ≥ 3`
    /// class `k` sits at `offset·u₀ + separation·u_{k+1}`. The `u` are
    /// seeded orthonormal directions, so `dim ≥ 2` (K = 2) or `dim ≥ K + 1`.
    /// `u₀, u₁` are the rotation plane of a [`ShiftSpec`] with the same seed.
    pub fn gaussian(n_classes: usize, dim: usize, offset: f64, separation: f64, class_std: f64, seed: u64) -> Result<Self> {
        let needed = if n_classes == 2 { 2 } else { n_classes + 1 };
        if n_classes < 2 || dim < needed {
            return Err(Error::invalid(format!(
                "gaussian domain with K={n_classes} needs K >= 2 and dim >= {needed}, got dim {dim}"
            )));
        }
        // same draw as ShiftSpec::rotation_plane, so u₀, u₁ span the rotation plane
        let mut rng = rng_for(seed, STREAM_ROTATION_PLANE);
        let basis = random_orthonormal(dim, needed, &mut rng);
        let class_means = (0..n_classes)
            .map(|k| {
                let (dir, sign) = if n_classes == 2 { (1, if k == 0 { 1.0 } else { -1.0 }) } else { (k + 1, 1.0) };
                (0..dim).map(|i| offset * basis[0][i] + sign * separation * basis[dir][i]).collect()
            })
            .collect();
        let spec = Self {
            n_classes,
            dim,
            class_means,
            class_std,
            min_instances: 1,
            max_instances: 5,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The two-class, 8-dimensional benchmark domain.
    pub fn benchmark(seed: u64) -> Self {
        Self::gaussian(2, 8, BENCH_OFFSET, BENCH_SEPARATION, BENCH_CLASS_STD, seed).expect("benchmark geometry is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("domain needs K >= 2 classes, got {}", self.n_classes)));
        }
        if self.dim == 0 {
            return Err(Error::invalid("domain dim must be >= 1"));
        }
        if self.class_means.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "{} class means given for {} classes",
                self.class_means.len(),
                self.n_classes
            )));
        }
        for (k, m) in self.class_means.iter().enumerate() {
            if m.len() != self.dim || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("class mean {k} must be {} finite values", self.dim)));
            }
            if self.class_means[..k].contains(m) {
                return Err(Error::invalid(format!("class mean {k} duplicates an earlier class")));
            }
        }
        if !(self.class_std >= 0.0 && self.class_std.is_finite()) {
            return Err(Error::invalid(format!("class_std must be >= 0, got {}", self.class_std)));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::invalid(format!(
                "instances per sample must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_instances, self.max_instances
            )));
        }
        Ok(())
    }

    fn draw_instance(&self, class: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.class_means[class]) {
            *o = m + self.class_std * gaussian(rng);
        }
    }
}

/// Gram–Schmidt on Gaussian draws.
fn random_orthonormal(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Labeled instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub instances: DenseMatrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn gen_labeled(spec: &DomainSpec, n: usize, stream: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, stream);
    // exact round-robin counts keep classes balanced within ±1
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut instances = DenseMatrix::zeros(n, spec.dim);
    for (i, &y) in labels.iter().enumerate() {
        spec.draw_instance(y, &mut rng, instances.row_mut(i));
    }
    Ok(LabeledDataset { instances, labels })
}

/// Labeled source-domain training set of `n` instances.
pub fn gen_source(spec: &DomainSpec, n: usize) -> Result<LabeledDataset> {
    gen_labeled(spec, n, STREAM_SOURCE)
}

/// Source-domain holdout, disjoint in randomness from [`gen_source`].
pub fn gen_source_holdout(spec: &DomainSpec, n: usize) -> Result<LabeledDataset> {
    gen_labeled(spec, n, STREAM_HOLDOUT)
}

/// One elementary distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shift {
    /// Givens rotation by this many degrees in the seeded 2-plane.
    Rotation { degrees: f64 },
    Translation { offset: Vec<f64> },
    /// Additive isotropic Gaussian noise.
    Noise { sigma: f64 },
    Scale { factor: f64 },
}

/// Shifts applied left to right. `seed` fixes the rotation plane and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub shifts: Vec<Shift>,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity(seed: u64) -> Self {
        Self { shifts: Vec::new(), seed }
    }

    /// Rotation by 45° followed by noise σ = 0.2.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            shifts: vec![Shift::Rotation { degrees: 45.0 }, Shift::Noise { sigma: 0.2 }],
            seed,
        }
    }

    /// The orthonormal pair spanning the rotation plane in `R^dim`.
    pub fn rotation_plane(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut basis = random_orthonormal(dim, 2, &mut rng_for(self.seed, STREAM_ROTATION_PLANE));
        let v = basis.pop().expect("two vectors");
        let u = basis.pop().expect("two vectors");
        (u, v)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for s in &self.shifts {
            let ok = match s {
                Shift::Rotation { degrees } => degrees.is_finite() && (dim >= 2 || *degrees == 0.0),
                Shift::Translation { offset } => offset.len() == dim && offset.iter().all(|v| v.is_finite()),
                Shift::Noise { sigma } => sigma.is_finite() && *sigma >= 0.0,
                Shift::Scale { factor } => factor.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!("shift {s} is invalid for dimension {dim}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::Rotation { degrees } => write!(f, "rotation:{degrees}"),
            Shift::Translation { offset } => {
                let parts: Vec<String> = offset.iter().map(f64::to_string).collect();
                write!(f, "translation:{}", parts.join(";"))
            }
            Shift::Noise { sigma } => write!(f, "noise:{sigma}"),
            Shift::Scale { factor } => write!(f, "scale:{factor}"),
        }
    }
}

impl FromStr for Shift {
    type Err = Error;

    /// `rotation:DEG`, `translation:X0;X1;…`, `noise:SIGMA` or `scale:FACTOR`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("shift `{s}` must look like kind:value")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number `{v}` in shift `{s}`: {e}")))
        };
        match kind.trim() {
            "rotation" => Ok(Shift::Rotation { degrees: num(arg)? }),
            "translation" => Ok(Shift::Translation {
                offset: arg.split(';').map(num).collect::<Result<_>>()?,
            }),
            "noise" => Ok(Shift::Noise { sigma: num(arg)? }),
            "scale" => Ok(Shift::Scale { factor: num(arg)? }),
            other => Err(Error::invalid(format!("unknown shift kind `{other}`"))),
        }
    }
}

/// Parses a comma-separated shift list; `none` or empty means no shift.
pub fn parse_shift_list(s: &str) -> Result<Vec<Shift>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_shift_list(shifts: &[Shift]) -> String {
    if shifts.is_empty() {
        return "none".into();
    }
    shifts.iter().map(Shift::to_string).collect::<Vec<_>>().join(",")
}

fn rotate_in_plane(x: &mut [f64], u: &[f64], v: &[f64], cos: f64, sin: f64) {
    let a = dot(x, u);
    let b = dot(x, v);
    // (a, b) → (a cos − b sin, a sin + b cos) inside span{u, v}
    let da = a * (cos - 1.0) - b * sin;
    let db = a * sin + b * (cos - 1.0);
    for ((xi, ui), vi) in x.iter_mut().zip(u).zip(v) {
        *xi += da * ui + db * vi;
    }
}

fn apply_shift_with_noise_stream(instances: &DenseMatrix, shift: &ShiftSpec, noise_stream: u64) -> Result<DenseMatrix> {
    instances.ensure_finite("shift input")?;
    let dim = instances.cols();
    shift.validate(dim)?;
    let mut out = instances.clone();
    let mut noise_rng = rng_for(shift.seed, STREAM_NOISE_BASE + noise_stream);
    for s in &shift.shifts {
        match s {
            Shift::Rotation { degrees } => {
                if *degrees == 0.0 {
                    continue;
                }
                let (u, v) = shift.rotation_plane(dim);
                let (sin, cos) = degrees.to_radians().sin_cos();
                for r in 0..out.rows() {
                    rotate_in_plane(out.row_mut(r), &u, &v, cos, sin);
                }
            }
            Shift::Translation { offset } => {
                for r in 0..out.rows() {
                    out.row_mut(r).iter_mut().zip(offset).for_each(|(x, o)| *x += o);
                }
            }
            Shift::Noise { sigma } => {
                if *sigma == 0.0 {
                    continue;
                }
                for x in out.as_mut_slice() {
                    *x += sigma * gaussian(&mut noise_rng);
                }
            }
            Shift::Scale { factor } => out.scale(*factor),
        }
    }
    Ok(out)
}

/// Applies `shift` to every row. Noise draws come from `shift.seed`.
pub fn apply_shift(instances: &DenseMatrix, shift: &ShiftSpec) -> Result<DenseMatrix> {
    apply_shift_with_noise_stream(instances, shift, 0)
}

/// What the adaptation loop is allowed to see of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Shifted draw; consumed by the teacher.
    pub weak: DenseMatrix,
    /// Weak view plus Gaussian jitter; consumed by the student.
    pub strong: DenseMatrix,
}

/// Ground-truth classes of a sample's instances. Only evaluation code reads
/// these; adaptation entry points take an [`Observation`] and never see them.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn reveal_for_evaluation(&self) -> &[usize] {
        &self.0
    }
}

/// One element of an online target stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub id: usize,
    pub observation: Observation,
    pub labels: HiddenLabels,
}

/// Draws `length` shifted samples and orders them by `order_seed`. Sample
/// contents depend only on `(spec, shift, length, jitter_std)`; the order
/// seed only permutes.
pub fn gen_target_stream(
    spec: &DomainSpec,
    shift: &ShiftSpec,
    length: usize,
    order_seed: u64,
    jitter_std: f64,
) -> Result<Vec<StreamSample>> {
    spec.validate()?;
    shift.validate(spec.dim)?;
    if !(jitter_std >= 0.0 && jitter_std.is_finite()) {
        return Err(Error::invalid(format!("jitter_std must be >= 0, got {jitter_std}")));
    }
    let mut rng = rng_for(spec.seed, STREAM_TARGET);
    let mut samples = Vec::with_capacity(length);
    for id in 0..length {
        let n_f = rng.random_range(spec.min_instances..=spec.max_instances);
        let labels: Vec<usize> = (0..n_f).map(|_| rng.random_range(0..spec.n_classes)).collect();
        let mut clean = DenseMatrix::zeros(n_f, spec.dim);
        for (i, &y) in labels.iter().enumerate() {
            spec.draw_instance(y, &mut rng, clean.row_mut(i));
        }
        let weak = apply_shift_with_noise_stream(&clean, shift, id as u64 + 1)?;
        let mut strong = weak.clone();
        for x in strong.as_mut_slice() {
            *x += jitter_std * gaussian(&mut rng);
        }
        samples.push(StreamSample {
            id,
            observation: Observation { weak, strong },
            labels: HiddenLabels(labels),
        });
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    Ok(samples)
}

/// Weak views and hidden labels of `samples`, concatenated in order.
pub fn evaluation_set<'a>(dim: usize, samples: impl IntoIterator<Item = &'a StreamSample>) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut views = Vec::new();
    for s in samples {
        labels.extend_from_slice(s.labels.reveal_for_evaluation());
        views.push(&s.observation.weak);
    }
    Ok(LabeledDataset {
        instances: DenseMatrix::vstack(dim, views)?,
        labels,
    })
}

pub const DUMP_FORMAT_VERSION: u32 = 1;

/// One line of the text dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub sample_id: usize,
    pub instance_index: usize,
    pub label: usize,
    pub values: Vec<f64>,
}

/// Writes the versioned dump: two `#` header lines, a column header, then
/// `sample_id,instance_index,label,x0,…,x{D-1}` per instance. Values use the
/// shortest round-trip decimal form.
pub fn write_dump<W: Write>(mut w: W, dim: usize, records: impl IntoIterator<Item = DumpRecord>) -> Result<()> {
    writeln!(w, "# memx-dump v{DUMP_FORMAT_VERSION}")?;
    writeln!(w, "# dim={dim}")?;
    let cols: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    writeln!(w, "sample_id,instance_index,label,{}", cols.join(","))?;
    for r in records {
        if r.values.len() != dim {
            return Err(Error::shape("write_dump", dim, r.values.len()));
        }
        write!(w, "{},{},{}", r.sample_id, r.instance_index, r.label)?;
        for v in &r.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Dump records of a stream (weak views).
pub fn stream_records(samples: &[StreamSample]) -> Vec<DumpRecord> {
    samples
        .iter()
        .flat_map(|s| {
            let labels = s.labels.reveal_for_evaluation();
            (0..labels.len()).map(move |i| DumpRecord {
                sample_id: s.id,
                instance_index: i,
                label: labels[i],
                values: s.observation.weak.row(i).to_vec(),
            })
        })
        .collect()
}

/// Dump records of a flat dataset: one sample per instance.
pub fn dataset_records(data: &LabeledDataset) -> Vec<DumpRecord> {
    data.labels
        .iter()
        .enumerate()
        .map(|(i, &label)| DumpRecord {
            sample_id: i,
            instance_index: 0,
            label,
            values: data.instances.row(i).to_vec(),
        })
        .collect()
}

/// Parses a dump written by [`write_dump`]. Returns `(dim, records)`.
pub fn read_dump<R: BufRead>(r: R) -> Result<(usize, Vec<DumpRecord>)> {
    let mut lines = r.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format("dump", format!("missing {what}")))
    };
    let version = next_line("version line")?;
    if version.trim() != format!("# memx-dump v{DUMP_FORMAT_VERSION}") {
        return Err(Error::format("dump", format!("unsupported version line `{version}`")));
    }
    let dim_line = next_line("dim line")?;
    let dim: usize = dim_line
        .trim()
        .strip_prefix("# dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::format("dump", format!("bad dim line `{dim_line}`")))?;
    next_line("column header")?;
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::format("dump", format!("record {}: {detail}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + dim {
            return Err(bad(format!("expected {} fields, got {}", 3 + dim, fields.len())));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let values = fields[3..]
            .iter()
            .map(|s| match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("bad value `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(DumpRecord {
            sample_id: int(fields[0])?,
            instance_index: int(fields[1])?,
            label: int(fields[2])?,
            values,
        });
    }
    Ok((dim, records))
}

/// Flattens dump records into a labeled dataset.
pub fn records_to_dataset(dim: usize, records: &[DumpRecord]) -> Result<LabeledDataset> {
    let data: Vec<f64> = records.iter().flat_map(|r| r.values.iter().copied()).collect();
    Ok(LabeledDataset {
        instances: DenseMatrix::new(records.len(), dim, data)?,
        labels: records.iter().map(|r| r.label).collect(),
    })
}
