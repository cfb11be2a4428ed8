//! Representation composition.
//!
//! Given `N` representations of width `d` per position, these functions
//! fuse them into one vector per position:
//!
//! * [`linear_combine`]: `Σᵢ rᵢ Wᵢ`, the concat-then-project baseline.
//! * [`full_bilinear`]: every pairwise product of the concatenation `R̂`,
//!   i.e. the serialised outer product `R̂R̂ᵀ`, projected by one large
//!   weight. Only feasible for tiny `Nd`; kept as a reference.
//! * [`ni_compose`]: the low-rank form `(R̂ᵀU ⊙ R̂ᵀV) P`, optionally with a
//!   constant 1 appended to `R̂` so the same product also carries
//!   first-order (linear) terms.
//!
//! The outer product is serialised row-major: entry `(j, k)` of `R̂R̂ᵀ`
//! lands at column `j·Nd + k`. [`expand_to_full`] uses the same order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `Nd` that [`full_bilinear`] accepts.
pub const FULL_BILINEAR_MAX_WIDTH: usize = 64;

/// The per-position concatenation `R̂ = [r₁, …, r_N]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConcatenatedRep {
    pub values: Var,
    pub n_parts: usize,
    pub part_width: usize,
}

impl ConcatenatedRep {
    /// Wraps a tensor already laid out as `positions × N·d`.
    pub fn from_concatenated(tape: &Tape, values: Var, n_parts: usize, part_width: usize) -> Result<Self> {
        let s = tape.shape(values);
        if s.len() != 2 || n_parts == 0 || s[1] != n_parts * part_width {
            return Err(Error::dim(
                "concat_reps",
                format!("{:?} is not positions × {}·{}", s, n_parts, part_width),
            ));
        }
        Ok(ConcatenatedRep {
            values,
            n_parts,
            part_width,
        })
    }

    /// `Nd`.
    pub fn width(&self) -> usize {
        self.n_parts * self.part_width
    }

    pub fn positions(&self, tape: &Tape) -> usize {
        tape.shape(self.values)[0]
    }

    /// Slices part `i` back out.
    pub fn part(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        if i >= self.n_parts {
            return Err(Error::dim("concat_reps", format!("part {} of {}", i, self.n_parts)));
        }
        tape.slice_cols(self.values, i * self.part_width, self.part_width)
    }
}

pub fn concat_reps(tape: &mut Tape, parts: &[Var]) -> Result<ConcatenatedRep> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::dim("concat_reps", "no representations given"))?;
    let s0 = tape.shape(first).to_vec();
    if s0.len() != 2 {
        return Err(Error::dim("concat_reps", format!("part 0 is {:?}, expected positions × d", s0)));
    }
    for (i, &p) in parts.iter().enumerate().skip(1) {
        if tape.shape(p) != &s0[..] {
            return Err(Error::dim(
                "concat_reps",
                format!("part {} has shape {:?}, expected {:?}", i, tape.shape(p), s0),
            ));
        }
    }
    let values = if parts.len() == 1 {
        first
    } else {
        tape.concat_cols(parts)?
    };
    Ok(ConcatenatedRep {
        values,
        n_parts: parts.len(),
        part_width: s0[1],
    })
}

/// `Σᵢ parts[i] · weights[i]`.
pub fn linear_combine(tape: &mut Tape, parts: &[Var], weights: &[Var]) -> Result<Var> {
    if parts.is_empty() || parts.len() != weights.len() {
        return Err(Error::dim(
            "linear_combine",
            format!("{} parts vs {} weights", parts.len(), weights.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&p, &w) in parts.iter().zip(weights) {
        let term = tape.matmul(p, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Reference bilinear weight `W^B`, one column per output element.
#[derive(Clone, Debug, PartialEq)]
pub struct FullBilinearParams {
    /// `(Nd)² × d_out`
    pub weight: Tensor,
}

impl FullBilinearParams {
    pub fn new(weight: Tensor, input_width: usize) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[0] != input_width * input_width {
            return Err(Error::dim(
                "full_bilinear",
                format!("weight {:?} needs {} rows", weight.shape(), input_width * input_width),
            ));
        }
        Ok(FullBilinearParams { weight })
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn full_guard(width: usize) -> Result<()> {
    if width > FULL_BILINEAR_MAX_WIDTH {
        return Err(Error::Config(format!(
            "full bilinear pooling with Nd = {} exceeds the reference limit of {}; use the low-rank ni_compose path",
            width, FULL_BILINEAR_MAX_WIDTH
        )));
    }
    Ok(())
}

/// `|R̂R̂ᵀ| W^B` per position.
pub fn full_bilinear(tape: &mut Tape, rep: &ConcatenatedRep, weight: Var) -> Result<Var> {
    let nd = rep.width();
    full_guard(nd)?;
    let ws = tape.shape(weight);
    if ws.len() != 2 || ws[0] != nd * nd {
        return Err(Error::dim(
            "full_bilinear",
            format!("weight {:?} needs {} rows for Nd = {}", ws, nd * nd, nd),
        ));
    }
    let outer = tape.outer_flatten(rep.values)?;
    tape.matmul(outer, weight)
}

/// Checks `1 ≤ rank ≤ Nd`.
pub fn check_rank(rank: usize, input_width: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("composition rank must be at least 1".into()));
    }
    if rank > input_width {
        return Err(Error::Config(format!(
            "composition rank {} exceeds the bound r <= Nd = {}",
            rank, input_width
        )));
    }
    Ok(())
}

/// Low-rank factors `U`, `V` (`(Nd + [extended]) × r`) and `P` (`r × d_out`).
///
/// Without the extension the factors have exactly `Nd` rows; with it the
/// extra last row pairs with the appended constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionParams {
    pub u: Tensor,
    pub v: Tensor,
    pub p: Tensor,
    pub rank: usize,
    pub extended: bool,
    pub n_parts: usize,
    pub part_width: usize,
}

impl CompositionParams {
    /// All-zero factors of the right shapes.
    pub fn zeros(n_parts: usize, part_width: usize, rank: usize, d_out: usize, extended: bool) -> Result<Self> {
        let nd = n_parts * part_width;
        check_rank(rank, nd)?;
        let rows = nd + extended as usize;
        Ok(CompositionParams {
            u: Tensor::zeros(&[rows, rank]),
            v: Tensor::zeros(&[rows, rank]),
            p: Tensor::zeros(&[rank, d_out]),
            rank,
            extended,
            n_parts,
            part_width,
        })
    }

    /// Random init: `U, V ~ N(0, σ²)` with `σ = 1/√(Nd·√r)` and
    /// `P ~ N(0, 1)`, which keeps the output at unit variance for
    /// unit-variance inputs.
    pub fn init<R: Rng + ?Sized>(
        n_parts: usize,
        part_width: usize,
        rank: usize,
        d_out: usize,
        extended: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(n_parts, part_width, rank, d_out, extended)?;
        let (uv_std, p_std) = init_stds(params.input_width(), rank);
        params.u = Tensor::randn(params.u.shape(), uv_std, rng);
        params.v = Tensor::randn(params.v.shape(), uv_std, rng);
        params.p = Tensor::randn(params.p.shape(), p_std, rng);
        Ok(params)
    }

    pub fn from_factors(u: Tensor, v: Tensor, p: Tensor, n_parts: usize, part_width: usize, extended: bool) -> Result<Self> {
        let nd = n_parts * part_width;
        let rows = nd + extended as usize;
        let rank = p.shape().first().copied().unwrap_or(0);
        check_rank(rank, nd)?;
        for (name, t) in [("U", &u), ("V", &v)] {
            if t.shape() != [rows, rank] {
                return Err(Error::dim(
                    "composition",
                    format!("{} is {:?}, expected [{}, {}]", name, t.shape(), rows, rank),
                ));
            }
        }
        if p.shape().len() != 2 {
            return Err(Error::dim("composition", format!("P is {:?}, expected r × d_out", p.shape())));
        }
        Ok(CompositionParams {
            u,
            v,
            p,
            rank,
            extended,
            n_parts,
            part_width,
        })
    }

    /// `Nd`, excluding the extension row.
    pub fn input_width(&self) -> usize {
        self.n_parts * self.part_width
    }

    pub fn d_out(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn count_params(&self) -> usize {
        count_params(self.input_width(), self.rank, self.d_out(), self.extended)
    }

    /// Element total of the materialised factors.
    pub fn materialized_len(&self) -> usize {
        self.u.len() + self.v.len() + self.p.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> CompositionVars {
        CompositionVars {
            u: tape.leaf(&self.u),
            v: tape.leaf(&self.v),
            p: tape.leaf(&self.p),
            rank: self.rank,
            extended: self.extended,
            input_width: self.input_width(),
        }
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in [&mut self.u, &mut self.v, &mut self.p] {
            t.set_requires_grad(on);
        }
    }
}

/// Standard deviations `(U and V, P)` used by [`CompositionParams::init`].
pub fn init_stds(input_width: usize, rank: usize) -> (f64, f64) {
    (1.0 / (input_width as f64 * (rank as f64).sqrt()).sqrt(), 1.0)
}

/// Factors recorded on a tape, ready for [`ni_compose`].
#[derive(Clone, Copy, Debug)]
pub struct CompositionVars {
    pub u: Var,
    pub v: Var,
    pub p: Var,
    pub rank: usize,
    pub extended: bool,
    pub input_width: usize,
}

impl CompositionVars {
    pub fn new(tape: &Tape, u: Var, v: Var, p: Var, input_width: usize, extended: bool) -> Result<Self> {
        let rank = tape.shape(p).first().copied().unwrap_or(0);
        check_rank(rank, input_width)?;
        let rows = input_width + extended as usize;
        for (name, x) in [("U", u), ("V", v)] {
            if tape.shape(x) != [rows, rank] {
                return Err(Error::dim(
                    "ni_compose",
                    format!("{} is {:?}, expected [{}, {}]", name, tape.shape(x), rows, rank),
                ));
            }
        }
        Ok(CompositionVars {
            u,
            v,
            p,
            rank,
            extended,
            input_width,
        })
    }
}

/// `(R̂⁺ᵀU ⊙ R̂⁺ᵀV) P` per position, where `R̂⁺` is `R̂` with a trailing 1
/// when the extension is active and `R̂` otherwise.
pub fn ni_compose(tape: &mut Tape, rep: &ConcatenatedRep, params: &CompositionVars) -> Result<Var> {
    check_rank(params.rank, rep.width())?;
    if rep.width() != params.input_width {
        return Err(Error::dim(
            "ni_compose",
            format!(
                "representation width {} does not match factor rows {}",
                rep.width(),
                params.input_width
            ),
        ));
    }
    let input = if params.extended {
        let positions = rep.positions(tape);
        let ones = tape.constant(&[positions, 1], vec![1.0; positions])?;
        tape.concat_cols(&[rep.values, ones])?
    } else {
        rep.values
    };
    let left = tape.matmul(input, params.u)?;
    let right = tape.matmul(input, params.v)?;
    let inter = tape.mul(left, right)?;
    tape.matmul(inter, params.p)
}

/// Rebuilds `W^B` from non-extended factors: column `i` is the row-major
/// flattening of `Σ_k P[k, i] · U[:, k] V[:, k]ᵀ`.
pub fn expand_to_full(params: &CompositionParams) -> Result<FullBilinearParams> {
    if params.extended {
        return Err(Error::Config(
            "expand_to_full needs non-extended factors; the appended 1 has no place in W^B".into(),
        ));
    }
    let nd = params.input_width();
    full_guard(nd)?;
    let (r, d_out) = (params.rank, params.d_out());
    let (u, v, p) = (params.u.data(), params.v.data(), params.p.data());
    let mut w = vec![0.0; nd * nd * d_out];
    for j in 0..nd {
        for k in 0..nd {
            let row = &mut w[(j * nd + k) * d_out..(j * nd + k + 1) * d_out];
            for q in 0..r {
                let uv = u[j * r + q] * v[k * r + q];
                if uv == 0.0 {
                    continue;
                }
                for (i, x) in row.iter_mut().enumerate() {
                    *x += p[q * d_out + i] * uv;
                }
            }
        }
    }
    FullBilinearParams::new(Tensor::new(vec![nd * nd, d_out], w)?, nd)
}

/// `2·(Nd + [extended])·r + r·d_out`.
pub fn count_params(input_width: usize, rank: usize, d_out: usize, extended: bool) -> usize {
    2 * (input_width + extended as usize) * rank + rank * d_out
}

/// `(Nd)²·d_out`, widened so realistic sizes do not overflow.
pub fn full_bilinear_param_count(input_width: usize, d_out: usize) -> u128 {
    (input_width as u128).pow(2) * d_out as u128
}

/// Evaluates [`ni_compose`] on plain tensors. `rep` is `positions × Nd`.
pub fn compose_values(rep: &Tensor, params: &CompositionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(rep);
    let rep = ConcatenatedRep::from_concatenated(&tape, x, params.n_parts, params.part_width)?;
    let vars = params.bind(&mut tape);
    let out = ni_compose(&mut tape, &rep, &vars)?;
    Ok(tape.to_tensor(out))
}

/// Evaluates [`full_bilinear`] on plain tensors. `rep` is `positions × Nd`.
pub fn full_bilinear_values(rep: &Tensor, n_parts: usize, params: &FullBilinearParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(rep);
    let part_width = rep.cols() / n_parts.max(1);
    let rep = ConcatenatedRep::from_concatenated(&tape, x, n_parts, part_width)?;
    let w = tape.leaf(&params.weight);
    let out = full_bilinear(&mut tape, &rep, w)?;
    Ok(tape.to_tensor(out))
}
