//! Tree samples: simulation of the BAR(p) recursion and CSV I/O.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};
use crate::model::{is_stable, BarParams};
use crate::noise::NoiseSpec;
use crate::rng::Stream;
use crate::treeindex::{generation_of, tree_size, NodeId, MAX_GENERATION};

/// Trait values `X_1 ..= X_{2^(n+1)-1}` over the complete sub-tree `T_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSample {
    pub p: usize,
    pub n_generations: u32,
    values: Vec<f64>,
}

impl TreeSample {
    pub fn from_values(p: usize, values: Vec<f64>) -> Result<Self> {
        if p == 0 {
            return Err(BarError::validation("order p must be at least 1"));
        }
        let len = values.len() as u64;
        if len == 0 || !(len + 1).is_power_of_two() {
            return Err(BarError::validation(format!(
                "{len} values do not fill a complete sub-tree"
            )));
        }
        let n_generations = (len + 1).trailing_zeros() - 1;
        Ok(TreeSample { p, n_generations, values })
    }

    #[inline]
    pub fn x(&self, k: u64) -> f64 {
        self.values[(k - 1) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Regression vector `(X_k, X_{k/2}, .., X_{k/2^(p-1)})`.
    pub fn regression_vector(&self, k: NodeId) -> Result<DVector<f64>> {
        let mut out = vec![0.0; self.p];
        self.fill_regressor(k, &mut out)?;
        Ok(DVector::from_vec(out))
    }

    /// Writes the regression vector of `k` into `out[..p]`.
    pub fn fill_regressor(&self, k: NodeId, out: &mut [f64]) -> Result<()> {
        let g = generation_of(k).get() as usize;
        if g + 1 < self.p {
            return Err(BarError::domain(format!(
                "node {k} (generation {g}) has fewer than {} ancestors on record",
                self.p - 1
            )));
        }
        if k.get() > self.values.len() as u64 {
            return Err(BarError::domain(format!("node {k} is outside the sample")));
        }
        self.fill_regressor_unchecked(k.get(), out);
        Ok(())
    }

    #[inline]
    pub(crate) fn fill_regressor_unchecked(&self, k: u64, out: &mut [f64]) {
        for (i, slot) in out.iter_mut().enumerate().take(self.p) {
            *slot = self.x(k >> i);
        }
    }

    /// CSV with header `node_id,x`, ascending ids, shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = ryu::Buffer::new();
        writeln!(w, "node_id,x")?;
        for (i, &x) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, buf.format(x))?;
        }
        w.flush()
    }

    /// Reads the CSV written by [`TreeSample::write_csv`]. Rows must list
    /// every node of a complete sub-tree in ascending order.
    pub fn read_csv<R: BufRead>(p: usize, r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or(BarError::Parse { line: 1, message: "empty file".into() })?;
        if header.trim() != "node_id,x" {
            return Err(BarError::Parse {
                line: 1,
                message: format!("expected header `node_id,x`, found `{}`", header.trim()),
            });
        }
        let mut values = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| BarError::Parse { line: line_no, message };
            let (id, x) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("malformed row `{line}`")))?;
            let id: u64 = id
                .trim()
                .parse()
                .map_err(|_| bad(format!("malformed node id in row `{line}`")))?;
            let x: f64 = x
                .trim()
                .parse()
                .map_err(|_| bad(format!("malformed value in row `{line}`")))?;
            let expected = values.len() as u64 + 1;
            if id != expected {
                return Err(if id > expected {
                    BarError::validation(format!("missing node id {expected}"))
                } else {
                    bad(format!("node id {id} out of order (expected {expected})"))
                });
            }
            if !x.is_finite() {
                return Err(bad(format!("non-finite value for node {id}")));
            }
            values.push(x);
        }
        let len = values.len() as u64;
        if len == 0 {
            return Err(BarError::validation("missing node id 1"));
        }
        if !(len + 1).is_power_of_two() {
            return Err(BarError::validation(format!("missing node id {}", len + 1)));
        }
        TreeSample::from_values(p, values)
    }
}

/// How the first `2^p - 1` nodes are filled before the recursion starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    /// Values for nodes `1 ..= 2^p - 1`, in id order.
    Explicit { values: Vec<f64> },
    /// Independent normals. The mean defaults to `a_0 / (1 - sum a_i)`
    /// (0 when that is not finite) and the variance to 1.
    IidNormal {
        #[serde(default)]
        mean: Option<f64>,
        #[serde(default)]
        var: Option<f64>,
    },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::IidNormal { mean: None, var: None }
    }
}

impl InitSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        let need = (1usize << p) - 1;
        match self {
            InitSpec::Explicit { values } => {
                if values.len() != need {
                    return Err(BarError::validation(format!(
                        "explicit init for p = {p} needs {need} values (nodes 1..={need}), got {}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(BarError::validation("explicit init values must be finite"));
                }
            }
            InitSpec::IidNormal { var, mean } => {
                if let Some(v) = var {
                    if !(*v >= 0.0 && v.is_finite()) {
                        return Err(BarError::validation("init variance must be non-negative"));
                    }
                }
                if mean.is_some_and(|m| !m.is_finite()) {
                    return Err(BarError::validation("init mean must be finite"));
                }
            }
        }
        Ok(())
    }

    fn fill(&self, params: &BarParams, stream: &mut Stream, out: &mut [f64]) {
        match self {
            InitSpec::Explicit { values } => out.copy_from_slice(values),
            InitSpec::IidNormal { mean, var } => {
                let center = mean.unwrap_or_else(|| {
                    let m = params.a[0] / (1.0 - params.a[1..].iter().sum::<f64>());
                    if m.is_finite() {
                        m
                    } else {
                        0.0
                    }
                });
                let sd = var.unwrap_or(1.0).sqrt();
                for chunk in out.chunks_mut(2) {
                    let (z1, z2) = stream.normal_pair();
                    chunk[0] = center + sd * z1;
                    if let Some(slot) = chunk.get_mut(1) {
                        *slot = center + sd * z2;
                    }
                }
            }
        }
    }
}

/// Simulates `T_n` after checking the contraction condition.
pub fn simulate_tree(
    params: &BarParams,
    spec: &NoiseSpec,
    init: &InitSpec,
    n: u32,
    seed: u64,
) -> Result<TreeSample> {
    let report = is_stable(params)?;
    if !report.stable {
        return Err(BarError::Instability(format!(
            "companion matrices fail the contraction check (best joint bound {:.6})",
            report.joint_bound()
        )));
    }
    simulate_tree_unchecked(params, spec, init, n, seed)
}

/// Like [`simulate_tree`] but skips the stability check.
pub fn simulate_tree_unchecked(
    params: &BarParams,
    spec: &NoiseSpec,
    init: &InitSpec,
    n: u32,
    seed: u64,
) -> Result<TreeSample> {
    spec.validate()?;
    simulate_tree_with_noise(params, init, n, seed, |s| spec.sample_pair(s))
}

/// Runs the recursion with a caller-supplied noise source.
///
/// The stream is seeded from `seed`; initial values are drawn first (when
/// random), then one noise pair per mother in ascending mother id. Passing
/// `|_| (0.0, 0.0)` gives the noiseless skeleton of the process.
pub fn simulate_tree_with_noise<F>(
    params: &BarParams,
    init: &InitSpec,
    n: u32,
    seed: u64,
    mut noise: F,
) -> Result<TreeSample>
where
    F: FnMut(&mut Stream) -> (f64, f64),
{
    params.validate()?;
    let p = params.p;
    if (n as usize) < p {
        return Err(BarError::domain(format!("n = {n} is below the model order p = {p}")));
    }
    if n > MAX_GENERATION.min(40) {
        return Err(BarError::domain(format!("n = {n} is too large to simulate")));
    }
    init.validate(p)?;

    let mut stream = Stream::new(seed);
    let mut values = vec![0.0; tree_size(n) as usize];
    let seeded = (1usize << p) - 1;
    init.fill(params, &mut stream, &mut values[..seeded]);

    let (a, b) = (&params.a, &params.b);
    let first_mother = 1u64 << (p - 1);
    let last_mother = 1u64 << n;
    for m in first_mother..last_mother {
        let (mut even, mut odd) = (a[0], b[0]);
        for i in 1..=p {
            let x = values[((m >> (i - 1)) - 1) as usize];
            even += a[i] * x;
            odd += b[i] * x;
        }
        let (e, o) = noise(&mut stream);
        values[(2 * m - 1) as usize] = even + e;
        values[(2 * m) as usize] = odd + o;
    }
    Ok(TreeSample { p, n_generations: n, values })
}
