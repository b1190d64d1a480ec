//! On-disk formats: the binary field format, flow checkpoints with exact
//! resume, CSV emission and minimal SVG line plots.

use crate::error::BubbleflowError;
use crate::fields::SphereField;
use crate::flow::{DiagnosticsRecord, FlowPhase};
use crate::torus::TorusSpec;
use std::io::{Read, Write};
use std::path::Path;

const FIELD_MAGIC: &[u8; 4] = b"BFLD";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BFCK";
const FORMAT_VERSION: u32 = 1;

/// Write a field: magic, version, grid_n, side, row-major f64 triples (LE).
pub fn write_field(path: &Path, field: &SphereField) -> Result<(), BubbleflowError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FIELD_MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(field.spec.grid_n as u32).to_le_bytes())?;
    f.write_all(&field.spec.side.to_le_bytes())?;
    for v in &field.data {
        for c in v {
            f.write_all(&c.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<SphereField, BubbleflowError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(BubbleflowError::Config(format!(
            "bad field magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut f)?;
    if version != FORMAT_VERSION {
        return Err(BubbleflowError::Config(format!(
            "unsupported field version {version}"
        )));
    }
    let grid_n = read_u32(&mut f)? as usize;
    let side = read_f64(&mut f)?;
    let spec = TorusSpec::new(side, grid_n)?;
    let mut data = vec![[0.0f64; 3]; grid_n * grid_n];
    for v in &mut data {
        for c in v.iter_mut() {
            *c = read_f64(&mut f)?;
        }
    }
    Ok(SphereField { spec, data })
}

/// Lossless CSV export for small grids: `i,j,x,y,ux,uy,uz`.
pub fn write_field_csv(path: &Path, field: &SphereField) -> Result<(), BubbleflowError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "i,j,x,y,ux,uy,uz")?;
    let n = field.spec.grid_n;
    for j in 0..n {
        for i in 0..n {
            let p = field.spec.node(i, j);
            let v = field.get(i, j);
            writeln!(f, "{},{},{},{},{},{},{}", i, j, p[0], p[1], v[0], v[1], v[2])?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Dynamic flow state captured for exact resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub field: SphereField,
    pub t: f64,
    pub mu: f64,
    pub energy: f64,
    pub dist_u: f64,
    pub dist_g: f64,
    pub phase: FlowPhase,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    pub core_grid_offset: f64,
    pub b: [f64; 2],
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), BubbleflowError> {
    write_field(path, &ck.field)?;
    let mut f = std::io::BufWriter::new(
        std::fs::OpenOptions::new().append(true).open(path)?,
    );
    f.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        ck.t,
        ck.mu,
        ck.energy,
        ck.dist_u,
        ck.dist_g,
        ck.core_grid_offset,
        ck.b[0],
        ck.b[1],
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    let phase = match ck.phase {
        FlowPhase::Coupled => 0u8,
        FlowPhase::Frozen => 1,
        FlowPhase::Converged => 2,
    };
    f.write_all(&[phase])?;
    f.write_all(&ck.steps_accepted.to_le_bytes())?;
    f.write_all(&ck.steps_rejected.to_le_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, BubbleflowError> {
    let field = read_field(path)?;
    let mut f = std::fs::File::open(path)?;
    let header = 4 + 4 + 4 + 8;
    let payload = field.data.len() as u64 * 24;
    use std::io::Seek;
    f.seek(std::io::SeekFrom::Start(header + payload))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(BubbleflowError::Config("missing checkpoint trailer".into()));
    }
    let mut vals = [0.0f64; 8];
    for v in vals.iter_mut() {
        *v = read_f64(&mut f)?;
    }
    let mut phase_byte = [0u8; 1];
    f.read_exact(&mut phase_byte)?;
    let phase = match phase_byte[0] {
        0 => FlowPhase::Coupled,
        1 => FlowPhase::Frozen,
        _ => FlowPhase::Converged,
    };
    let steps_accepted = read_u64(&mut f)?;
    let steps_rejected = read_u64(&mut f)?;
    Ok(Checkpoint {
        field,
        t: vals[0],
        mu: vals[1],
        energy: vals[2],
        dist_u: vals[3],
        dist_g: vals[4],
        core_grid_offset: vals[5],
        b: [vals[6], vals[7]],
        phase,
        steps_accepted,
        steps_rejected,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, BubbleflowError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, BubbleflowError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, BubbleflowError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Write the per-step diagnostics as CSV with a provenance comment line.
pub fn write_timeseries(
    path: &Path,
    records: &[DiagnosticsRecord],
    provenance: &str,
) -> Result<(), BubbleflowError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# {provenance}")?;
    writeln!(f, "{}", DiagnosticsRecord::CSV_HEADER)?;
    for r in records {
        writeln!(f, "{}", r.csv_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Minimal static SVG polyline plot of (x, y) series.
pub fn write_svg_plot(
    path: &Path,
    title: &str,
    series: &[(&str, &[(f64, f64)])],
) -> Result<(), BubbleflowError> {
    let (w, h) = (720.0, 420.0);
    let margin = 50.0;
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (_, pts) in series {
        for (x, y) in pts.iter() {
            if x.is_finite() && y.is_finite() {
                min_x = min_x.min(*x);
                max_x = max_x.max(*x);
                min_y = min_y.min(*y);
                max_y = max_y.max(*y);
            }
        }
    }
    if !min_x.is_finite() || max_x <= min_x {
        min_x = 0.0;
        max_x = 1.0;
    }
    if !min_y.is_finite() || max_y <= min_y {
        min_y = 0.0;
        max_y = 1.0;
    }
    let sx = |x: f64| margin + (x - min_x) / (max_x - min_x) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - min_y) / (max_y - min_y) * (h - 2.0 * margin);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        margin, title
    ));
    out.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
        w - 2.0 * margin,
        h - 2.0 * margin,
        m = margin
    ));
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut d = String::new();
        for (x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            if d.is_empty() {
                d.push('M');
            } else {
                d.push('L');
            }
            d.push_str(&format!("{:.2} {:.2} ", sx(*x), sy(*y)));
        }
        out.push_str(&format!(
            "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            w - margin - 120.0,
            margin + 16.0 * (k as f64 + 1.0)
        ));
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}
