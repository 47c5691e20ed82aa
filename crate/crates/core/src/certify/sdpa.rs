//! First-order moment relaxation of the certificate and its SDPA sparse
//! (`.dat-s`) encoding.
//!
//! The relaxation is emitted in SDPA's dual form
//! `max F₀•Y  s.t.  F_k•Y = rhs_k,  Y ⪰ 0`. Block 1 of `Y` is the moment
//! matrix `[[1, wᵀ], [w, W]]`; block 2, when present, is a diagonal block of
//! slacks, one per inequality constraint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::qcqp::{CertificateProblem, Quadratic, Sense};
use crate::error::{Error, Result};

/// One nonzero of `F_k` in block `block` at `(row, col)`, all 1-based with
/// `row <= col`. Matrix 0 is the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpEntry {
    pub matrix: usize,
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SdpExport {
    /// `1 +` number of QCQP variables.
    pub moment_dim: usize,
    /// SDPA block structure; negative sizes denote diagonal blocks.
    pub block_sizes: Vec<i64>,
    pub rhs: Vec<f64>,
    /// Sorted by `(matrix, block, row, col)`.
    pub entries: Vec<SdpEntry>,
}

impl SdpExport {
    pub fn num_constraints(&self) -> usize {
        self.rhs.len()
    }

    pub fn objective_entries(&self) -> impl Iterator<Item = &SdpEntry> {
        self.entries.iter().filter(|e| e.matrix == 0)
    }

    /// Checks the rank-one lift of `w`, with every slack set to the value
    /// that closes its row. Returns the largest equality residual or
    /// negative slack, and the lifted objective `F₀•Y` (the negated QCQP
    /// objective).
    pub fn check_rank_one(&self, w: &DVector<f64>) -> (f64, f64) {
        let lift = |i: usize| if i == 1 { 1.0 } else { w[i - 2] };
        let m = self.num_constraints();
        let mut moment = vec![0.0; m + 1];
        let mut slack_coef = vec![0.0; m + 1];
        for e in &self.entries {
            if e.block == 1 {
                let mult = if e.row == e.col { 1.0 } else { 2.0 };
                moment[e.matrix] += mult * e.value * lift(e.row) * lift(e.col);
            } else {
                slack_coef[e.matrix] += e.value;
            }
        }
        let mut worst: f64 = 0.0;
        for k in 1..=m {
            let gap = self.rhs[k - 1] - moment[k];
            if slack_coef[k] == 0.0 {
                worst = worst.max(gap.abs());
            } else {
                worst = worst.max((-gap / slack_coef[k]).max(0.0));
            }
        }
        (worst, moment[0])
    }
}

#[derive(Default)]
struct MatrixBuilder {
    block1: BTreeMap<(usize, usize), f64>,
    slack: Option<usize>,
}

impl MatrixBuilder {
    fn add_moment(&mut self, i: usize, j: usize, v: f64) {
        *self.block1.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
    }

    /// Encodes the non-constant part of `q` as `F•Y` on the moment block.
    fn add_quadratic(&mut self, q: &Quadratic, scale: f64) {
        for &(i, a) in &q.linear {
            self.add_moment(1, i + 2, 0.5 * scale * a);
        }
        for &(i, j, a) in &q.quad {
            let v = if i == j { a } else { 0.5 * a };
            self.add_moment(i + 2, j + 2, scale * v);
        }
    }

    fn push(self, k: usize, out: &mut Vec<SdpEntry>) {
        for ((row, col), value) in self.block1 {
            if value != 0.0 {
                out.push(SdpEntry {
                    matrix: k,
                    block: 1,
                    row,
                    col,
                    value,
                });
            }
        }
        if let Some(s) = self.slack {
            out.push(SdpEntry {
                matrix: k,
                block: 2,
                row: s,
                col: s,
                value: -1.0,
            });
        }
    }
}

/// Shor lift of the certificate. Each constraint `g(w) ⋈ 0` becomes
/// `F•Y (− s) = −g(0)`; the normalization `Y₁₁ = 1` comes first whenever
/// the problem is nonempty. The objective is negated because SDPA
/// maximizes.
pub fn shor_relaxation(problem: &CertificateProblem) -> SdpExport {
    let n = problem.num_variables();
    let moment_dim = n + 1;
    let cons: Vec<_> = problem.constraints.iter().filter(|c| !c.expr.is_zero()).collect();
    let n_ineq = cons.iter().filter(|c| c.sense == Sense::Ge).count();
    let nonempty = !cons.is_empty() || !problem.objective.is_zero();
    let mut block_sizes = vec![moment_dim as i64];
    if n_ineq > 0 {
        block_sizes.push(-(n_ineq as i64));
    }
    let mut rhs = Vec::new();
    let mut entries = Vec::new();

    let mut obj = MatrixBuilder::default();
    obj.add_quadratic(&problem.objective, -1.0);
    if problem.objective.constant != 0.0 {
        obj.add_moment(1, 1, -problem.objective.constant);
    }
    obj.push(0, &mut entries);

    if nonempty {
        let mut norm = MatrixBuilder::default();
        norm.add_moment(1, 1, 1.0);
        norm.push(1, &mut entries);
        rhs.push(1.0);
    }
    let mut next_slack = 1;
    for c in cons {
        let mut b = MatrixBuilder::default();
        b.add_quadratic(&c.expr, 1.0);
        if c.sense == Sense::Ge {
            b.slack = Some(next_slack);
            next_slack += 1;
        }
        rhs.push(-c.expr.constant);
        b.push(rhs.len(), &mut entries);
    }
    SdpExport {
        moment_dim,
        block_sizes,
        rhs,
        entries,
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// The `.dat-s` text of `sdp`.
pub fn write_sdpa(sdp: &SdpExport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", sdp.num_constraints());
    let _ = writeln!(s, "{}", sdp.block_sizes.len());
    let sizes: Vec<String> = sdp.block_sizes.iter().map(i64::to_string).collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let rhs: Vec<String> = sdp.rhs.iter().map(|v| fmt_f64(*v)).collect();
    let _ = writeln!(s, "{}", rhs.join(" "));
    for e in &sdp.entries {
        let _ = writeln!(s, "{} {} {} {} {}", e.matrix, e.block, e.row, e.col, fmt_f64(e.value));
    }
    s
}

pub fn export_sdpa(sdp: &SdpExport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_sdpa(sdp))?;
    Ok(())
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("SDPA line {line}: {msg}"))
}

/// Parses the subset of the `.dat-s` format that [`write_sdpa`] produces:
/// no comments, whitespace-separated fields, one entry per line.
pub fn parse_sdpa(text: &str) -> Result<SdpExport> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("SDPA: missing {what}")))
    };
    let (ln, l) = next("constraint count")?;
    let m: usize = l.trim().parse().map_err(|e| parse_err(ln, e))?;
    let (ln, l) = next("block count")?;
    let nb: usize = l.trim().parse().map_err(|e| parse_err(ln, e))?;
    let (ln, l) = next("block sizes")?;
    let block_sizes: Vec<i64> = l
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| parse_err(ln, e)))
        .collect::<Result<_>>()?;
    if block_sizes.len() != nb {
        return Err(parse_err(
            ln,
            format!("expected {nb} block sizes, found {}", block_sizes.len()),
        ));
    }
    let (ln, l) = next("right-hand side")?;
    let rhs: Vec<f64> = l
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| parse_err(ln, e)))
        .collect::<Result<_>>()?;
    if rhs.len() != m {
        return Err(parse_err(
            ln,
            format!("expected {m} right-hand sides, found {}", rhs.len()),
        ));
    }
    let mut entries = Vec::new();
    for (ln, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 {
            return Err(parse_err(ln, "expected 5 fields"));
        }
        let idx = |t: &str| t.parse::<usize>().map_err(|e| parse_err(ln, e));
        let e = SdpEntry {
            matrix: idx(f[0])?,
            block: idx(f[1])?,
            row: idx(f[2])?,
            col: idx(f[3])?,
            value: f[4].parse().map_err(|e| parse_err(ln, e))?,
        };
        if e.matrix > m || e.block == 0 || e.block > nb {
            return Err(parse_err(ln, "matrix or block index out of range"));
        }
        let size = block_sizes[e.block - 1].unsigned_abs() as usize;
        if e.row == 0 || e.row > e.col || e.col > size {
            return Err(parse_err(ln, "entry outside the upper triangle of its block"));
        }
        entries.push(e);
    }
    Ok(SdpExport {
        moment_dim: block_sizes.first().map_or(0, |s| s.unsigned_abs() as usize),
        block_sizes,
        rhs,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::qcqp::{assemble_qcqp, QcqpConstraint, VariableLayout};
    use crate::certify::vacuous_params;
    use crate::model::load_benchmark;
    use crate::qp::ridge_diag;

    fn empty_problem() -> CertificateProblem {
        CertificateProblem {
            layout: VariableLayout {
                n_sys: 1,
                m_sys: 1,
                m_g: 0,
                n_qp: 1,
                m_qp: 0,
            },
            objective: Quadratic::default(),
            constraints: vec![],
            u_hat_box: vec![],
        }
    }

    #[test]
    fn empty_problem_is_header_only() {
        let sdp = shor_relaxation(&empty_problem());
        assert_eq!(write_sdpa(&sdp), "0\n1\n4\n\n");
        assert_eq!(parse_sdpa(&write_sdpa(&sdp)).unwrap(), sdp);
    }

    #[test]
    fn zero_objective_has_no_objective_entries() {
        let mut p = empty_problem();
        p.constraints.push(QcqpConstraint {
            group: crate::certify::ConstraintGroup::SafeSet,
            sense: Sense::Ge,
            expr: Quadratic {
                constant: 1.0,
                linear: vec![(0, -1.0)],
                quad: vec![],
            },
        });
        let sdp = shor_relaxation(&p);
        assert_eq!(sdp.objective_entries().count(), 0);
        assert_eq!(sdp.block_sizes, vec![4, -1]);
        assert_eq!(sdp.rhs, vec![1.0, -1.0]);
    }

    #[test]
    fn toy_square_lifts_to_the_diagonal() {
        // min x² over x free: objective entry on the diagonal of the moment block
        let mut p = empty_problem();
        p.objective = Quadratic {
            quad: vec![(0, 0, 1.0)],
            ..Default::default()
        };
        let sdp = shor_relaxation(&p);
        let obj: Vec<_> = sdp.objective_entries().copied().collect();
        assert_eq!(obj.len(), 1);
        assert_eq!((obj[0].row, obj[0].col, obj[0].value), (2, 2, -1.0));
        let w = DVector::from_vec(vec![3.0, 0.0, 0.0]);
        let (res, lifted) = sdp.check_rank_one(&w);
        assert_eq!(res, 0.0);
        assert_eq!(lifted, -9.0);
    }

    #[test]
    fn double_integrator_dimensions_and_round_trip() {
        let s = load_benchmark("double_integrator").unwrap();
        let safe = s.state_box_set().unwrap();
        let params = vacuous_params(2, &s.input_bounds, 4, 30).unwrap();
        let prob = assemble_qcqp(&s.model, &safe, &params, &ridge_diag(1, 4, 1e-3), &s.input_bounds).unwrap();
        let sdp = shor_relaxation(&prob);
        assert_eq!(sdp.moment_dim, 42);
        assert_eq!(sdp.block_sizes[0], 42);
        let text = write_sdpa(&sdp);
        let back = parse_sdpa(&text).unwrap();
        assert_eq!(back, sdp);
        assert_eq!(write_sdpa(&back), text);
        for e in &sdp.entries {
            assert!(e.row <= e.col);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_sdpa("").is_err());
        assert!(parse_sdpa("1\n1\n3\n\n").is_err());
        assert!(parse_sdpa("0\n1\n3\n\n0 1 3 2 1.0\n").is_err());
        assert!(parse_sdpa("0\n1\n3\n\n0 2 1 1 1.0\n").is_err());
    }
}
