use std::io::{self, Write};

use crate::SdpProblem;

/// Writes a problem as plain text, one coefficient per line.
///
/// ```text
/// rows <m>
/// blocks <n_1> <n_2> ...
/// free <k>
/// <row> psd <block> <i> <j> <value>
/// <row> free <j> <value>
/// <row> rhs <value>
/// ```
///
/// Indices are zero-based and `i <= j`. Values use the shortest round-trip
/// representation, so the output is byte-stable for a given problem.
pub fn write_sparse<W: Write>(problem: &SdpProblem, mut out: W) -> io::Result<()> {
    writeln!(out, "rows {}", problem.num_rows())?;
    let dims: Vec<String> = problem.block_dims.iter().map(|d| d.to_string()).collect();
    writeln!(out, "blocks {}", dims.join(" "))?;
    writeln!(out, "free {}", problem.num_free)?;
    for (r, c) in problem.constraints.iter().enumerate() {
        for e in &c.psd {
            writeln!(out, "{r} psd {} {} {} {:?}", e.block, e.row, e.col, e.value)?;
        }
        for (j, v) in &c.free {
            writeln!(out, "{r} free {j} {v:?}")?;
        }
        writeln!(out, "{r} rhs {:?}", c.rhs)?;
    }
    Ok(())
}
