use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{AffinityMap, AttentionKernel};
use crate::error::{Error, Result};
use crate::tensor::Graph;

/// Writes the key coordinates and weights of each requested query pixel of
/// batch element 0 as CSV with columns `qh,qw,kh,kw,weight`.
pub fn write_attention<W: Write>(
    g: &Graph,
    kernel: &dyn AttentionKernel,
    a: &AffinityMap,
    query_points: &[(usize, usize)],
    out: W,
) -> Result<()> {
    let geo = a.geometry;
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["qh", "qw", "kh", "kw", "weight"])?;
    for &(qh, qw) in query_points {
        if qh >= geo.query.0 || qw >= geo.query.1 {
            return Err(Error::invalid(
                "dump_attention",
                format!("query point ({qh}, {qw}) lies outside the {}×{} grid", geo.query.0, geo.query.1),
            ));
        }
        let coords = kernel.key_coords(&geo, qh, qw);
        let row = a.row(g, 0, qh, qw);
        for (&(kh, kw), w) in coords.iter().zip(row) {
            wtr.serialize((qh, qw, kh, kw, w))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn dump_attention(
    g: &Graph,
    kernel: &dyn AttentionKernel,
    a: &AffinityMap,
    query_points: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    write_attention(g, kernel, a, query_points, File::create(path)?)
}
