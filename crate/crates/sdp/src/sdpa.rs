//! SDPA sparse text format (`.dat-s`).
//!
//! The format states `minimize Σ c_i x_i  s.t.  Σ F_i x_i - F_0 ⪰ 0`, so a
//! problem `C + Σ y_k A_k ⪰ 0` is written with `F_0 = -C` and `F_k = A_k`.
//! Three comment lines carry what the format itself cannot: the objective
//! sense, a constant offset, and (when equalities were eliminated before
//! export) the original indices of the exported variables.
//!
//! Ordering is fixed: blocks in declaration order, `F_0` first, then variables
//! by index, entries within a matrix by (block, row, col).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::SdpError;
use crate::problem::{SdpProblem, Sense};
use crate::reduce::Reduction;

const HEADER: &str = "\"heraldkey sdpa-sparse v1";

/// Serializes `problem`. Equalities, if any, are eliminated first and the
/// retained variable indices are recorded in a `"kept` comment.
pub fn to_string(problem: &SdpProblem) -> Result<String, SdpError> {
    problem.validate()?;
    let (lmi, kept) = if problem.equalities().is_empty() {
        (problem.clone(), None)
    } else {
        let (red, reduced) = Reduction::new(problem);
        if red.conflict.is_some() {
            return Err(SdpError::Malformed(
                "equality constraints are inconsistent; nothing to export".into(),
            ));
        }
        (reduced, Some(red.kept))
    };
    let sign = match lmi.sense() {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    let sense = match lmi.sense() {
        Sense::Minimize => "minimize",
        Sense::Maximize => "maximize",
    };
    writeln!(out, "\"sense {sense}").unwrap();
    writeln!(out, "\"offset {}", lmi.offset()).unwrap();
    if let Some(kept) = &kept {
        let list: Vec<String> = kept.iter().map(|k| k.to_string()).collect();
        writeln!(out, "\"kept {}", list.join(" ")).unwrap();
    }
    writeln!(out, "{} =mDIM", lmi.num_vars()).unwrap();
    writeln!(out, "{} =nBLOCK", lmi.block_dims().len()).unwrap();
    let dims: Vec<String> = lmi.block_dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "{} =bLOCKsTRUCT", dims.join(" ")).unwrap();
    let c: Vec<String> = lmi
        .objective()
        .iter()
        .map(|c| (sign * c).to_string())
        .collect();
    writeln!(out, "{}", c.join(" ")).unwrap();
    for e in lmi.constant_entries() {
        writeln!(
            out,
            "0 {} {} {} {}",
            e.block + 1,
            e.row + 1,
            e.col + 1,
            -e.value
        )
        .unwrap();
    }
    for k in 0..lmi.num_vars() {
        for e in lmi.coefficient_entries(k) {
            writeln!(
                out,
                "{} {} {} {} {}",
                k + 1,
                e.block + 1,
                e.row + 1,
                e.col + 1,
                e.value
            )
            .unwrap();
        }
    }
    Ok(out)
}

pub fn write<W: Write>(problem: &SdpProblem, mut w: W) -> Result<(), SdpError> {
    w.write_all(to_string(problem)?.as_bytes())?;
    Ok(())
}

/// A parsed file: the problem plus the `"kept` map when present.
#[derive(Debug, Clone)]
pub struct SdpaFile {
    pub problem: SdpProblem,
    pub kept: Option<Vec<usize>>,
}

fn parse_err(line: usize, message: impl Into<String>) -> SdpError {
    SdpError::Parse {
        line,
        message: message.into(),
    }
}

/// Reads the SDPA sparse format. Punctuation `{ } ( ) ,` is treated as whitespace,
/// and text after `=` on a header line is ignored.
pub fn read<R: BufRead>(reader: R) -> Result<SdpaFile, SdpError> {
    let mut sense = Sense::Minimize;
    let mut offset = 0.0;
    let mut kept = None;
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut header_fields = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if let Some(rest) = trimmed
            .strip_prefix('"')
            .or_else(|| trimmed.strip_prefix('*'))
        {
            let mut parts = rest.split_whitespace();
            match parts.next() {
                Some("sense") => {
                    sense = match parts.next() {
                        Some("maximize") => Sense::Maximize,
                        Some("minimize") => Sense::Minimize,
                        other => return Err(parse_err(lineno, format!("unknown sense {other:?}"))),
                    }
                }
                Some("offset") => {
                    offset = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "bad offset"))?
                }
                Some("kept") => {
                    let list: Result<Vec<usize>, _> = parts.map(str::parse).collect();
                    kept = Some(list.map_err(|_| parse_err(lineno, "bad kept list"))?);
                }
                _ => {}
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let body = if header_fields < 3 {
            header_fields += 1;
            trimmed.split('=').next().unwrap_or("")
        } else {
            trimmed
        };
        for tok in body
            .split(|c: char| c.is_whitespace() || "{}(),".contains(c))
            .filter(|t| !t.is_empty())
        {
            tokens.push((lineno, tok.to_string()));
        }
    }

    let mut it = tokens.into_iter().peekable();
    let next_num = |it: &mut std::iter::Peekable<std::vec::IntoIter<(usize, String)>>,
                    what: &str|
     -> Result<(usize, f64), SdpError> {
        let (line, tok) = it
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file reading {what}")))?;
        tok.parse::<f64>()
            .map(|v| (line, v))
            .map_err(|_| parse_err(line, format!("expected number for {what}, got {tok:?}")))
    };
    let (_, m) = next_num(&mut it, "mDIM")?;
    let (line, nb) = next_num(&mut it, "nBLOCK")?;
    if m < 0.0 || nb < 1.0 {
        return Err(parse_err(line, "mDIM must be >= 0 and nBLOCK >= 1"));
    }
    let (m, nb) = (m as usize, nb as usize);
    let mut problem = SdpProblem::new(m, sense);
    for _ in 0..nb {
        let (_, d) = next_num(&mut it, "block size")?;
        problem.add_block(d.abs() as usize);
    }
    let sign = match sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    for k in 0..m {
        let (_, c) = next_num(&mut it, "objective")?;
        problem.set_objective(k, sign * c);
    }
    problem.set_offset(offset);
    while it.peek().is_some() {
        let (line, mat) = next_num(&mut it, "entry")?;
        let (_, blk) = next_num(&mut it, "block index")?;
        let (_, i) = next_num(&mut it, "row")?;
        let (_, j) = next_num(&mut it, "col")?;
        let (_, v) = next_num(&mut it, "value")?;
        let (mat, blk, i, j) = (mat as usize, blk as usize, i as usize, j as usize);
        if blk == 0 || blk > nb || i == 0 || j == 0 || mat > m {
            return Err(parse_err(line, "entry index out of range"));
        }
        if mat == 0 {
            problem.add_constant(blk - 1, i - 1, j - 1, -v);
        } else {
            problem.add_coefficient(mat - 1, blk - 1, i - 1, j - 1, v);
        }
    }
    problem.validate()?;
    Ok(SdpaFile { problem, kept })
}
