//! CSV and legacy-ASCII VTK import/export for meshes, flow states, features,
//! correction fields and prediction records.
//!
//! Numbers are written in shortest round-trip form, so a CSV written and read
//! back reproduces every value bit for bit. Quantities are non-dimensional;
//! header units name the reference scales (L length, U velocity).

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::ensemble::CellPrediction;
use crate::features::{feature_names, FeatureMatrix};
use crate::inversion::AssimilationData;
use crate::mesh::Mesh;
use crate::solver::{CorrectionField, FlowState};

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse(e.to_string())
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn put<W: Write>(w: &mut csv::Writer<W>, rec: Vec<String>) -> Result<()> {
    w.write_record(&rec).map_err(csv_err)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(Error::Io)
}

/// Rows of a CSV after its header, with every field parsed as `f64`.
fn read_numeric<R: Read>(r: R, min_cols: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header.len() < min_cols {
        return Err(Error::Parse(format!(
            "expected at least {min_cols} columns, header has {}",
            header.len()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: cannot parse {s:?}", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::Parse(format!("row {} has {} fields", line + 1, row.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn cell_id(v: f64, n: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= n {
        return Err(Error::Parse(format!("bad cell id {v}")));
    }
    Ok(v as usize)
}

pub fn write_mesh_csv<W: Write>(w: W, mesh: &Mesh) -> Result<()> {
    let mut w = writer(w);
    put(
        &mut w,
        ["cell", "x (L)", "y (L)", "volume (L^2)", "wall_distance (L)", "blanked"]
            .map(String::from)
            .to_vec(),
    )?;
    for c in 0..mesh.n_cells() {
        let [x, y] = mesh.center(c);
        put(
            &mut w,
            vec![
                c.to_string(),
                x.to_string(),
                y.to_string(),
                mesh.volume(c).to_string(),
                mesh.wall_distance()[c].to_string(),
                u8::from(mesh.is_blanked(c)).to_string(),
            ],
        )?;
    }
    finish(w)
}

const STATE_HEADER: [&str; 9] = [
    "cell",
    "x (L)",
    "y (L)",
    "u (U)",
    "v (U)",
    "p (U^2)",
    "k (U^2)",
    "omega (U/L)",
    "nu_t (UL)",
];

pub fn write_state_csv<W: Write>(w: W, mesh: &Mesh, s: &FlowState) -> Result<()> {
    if s.n_cells() != mesh.n_cells() {
        return invalid("state and mesh differ in size");
    }
    let mut w = writer(w);
    put(&mut w, STATE_HEADER.map(String::from).to_vec())?;
    for c in 0..mesh.n_cells() {
        let [x, y] = mesh.center(c);
        let vals = [x, y, s.u[c], s.v[c], s.p[c], s.k[c], s.omega[c], s.nu_t[c]];
        let mut rec = vec![c.to_string()];
        rec.extend(vals.iter().map(f64::to_string));
        put(&mut w, rec)?;
    }
    finish(w)
}

/// Reads a state written by [`write_state_csv`]. Solver bookkeeping (residual
/// history, iteration counts) is not stored and comes back empty.
pub fn read_state_csv<R: Read>(r: R, mesh: &Mesh, nu: f64) -> Result<FlowState> {
    let (_, rows) = read_numeric(r, STATE_HEADER.len())?;
    let n = mesh.n_cells();
    if rows.len() != n {
        return Err(Error::Parse(format!("state has {} rows, mesh has {n} cells", rows.len())));
    }
    let mut f = vec![vec![0.0; n]; 6];
    let mut seen = vec![false; n];
    for row in &rows {
        let c = cell_id(row[0], n)?;
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::Parse(format!("cell {c} listed twice")));
        }
        for (k, field) in f.iter_mut().enumerate() {
            field[c] = row[3 + k];
        }
    }
    let [u, v, p, k, omega, nu_t]: [Vec<f64>; 6] = f.try_into().expect("six fields");
    Ok(FlowState {
        u,
        v,
        p,
        k,
        omega,
        nu_t,
        nu,
        mean_pressure_gradient: [0.0; 2],
        equations: Vec::new(),
        residual_norms: Vec::new(),
        history: Vec::new(),
        iterations: 0,
        clip_events: 0,
    })
}

pub fn write_residual_history_csv<W: Write>(w: W, s: &FlowState) -> Result<()> {
    let mut w = writer(w);
    let mut header = vec!["iteration".to_string()];
    header.extend(s.equations.iter().map(|e| format!("{e} residual (-)")));
    put(&mut w, header)?;
    for (i, norms) in s.history.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(norms.iter().map(f64::to_string));
        put(&mut w, rec)?;
    }
    finish(w)
}

pub fn write_beta_csv<W: Write>(w: W, mesh: &Mesh, beta: &CorrectionField) -> Result<()> {
    if beta.len() != mesh.n_cells() {
        return invalid("correction field and mesh differ in size");
    }
    let mut w = writer(w);
    put(&mut w, ["cell", "x (L)", "y (L)", "beta (-)"].map(String::from).to_vec())?;
    for (c, b) in beta.values().iter().enumerate() {
        let [x, y] = mesh.center(c);
        put(&mut w, vec![c.to_string(), x.to_string(), y.to_string(), b.to_string()])?;
    }
    finish(w)
}

pub fn read_beta_csv<R: Read>(r: R, n_cells: usize) -> Result<CorrectionField> {
    let (_, rows) = read_numeric(r, 4)?;
    let mut beta = vec![1.0; n_cells];
    for row in &rows {
        beta[cell_id(row[0], n_cells)?] = row[3];
    }
    CorrectionField::from_values(beta)
}

pub fn write_objective_history_csv<W: Write>(w: W, objective: &[f64], gradient_norm: &[f64]) -> Result<()> {
    let mut w = writer(w);
    put(
        &mut w,
        ["iteration", "objective (U^2)", "gradient_norm (-)"].map(String::from).to_vec(),
    )?;
    for (i, j) in objective.iter().enumerate() {
        let g = gradient_norm.get(i).map_or(String::new(), f64::to_string);
        put(&mut w, vec![i.to_string(), j.to_string(), g])?;
    }
    finish(w)
}

/// Features with a `cell` column followed by one named column per feature.
pub fn write_features_csv<W: Write>(w: W, x: &FeatureMatrix) -> Result<()> {
    let names = feature_names();
    if x.n_cols() != names.len() {
        return invalid(format!("expected {} feature columns, got {}", names.len(), x.n_cols()));
    }
    let mut w = writer(w);
    let mut header = vec!["cell".to_string()];
    header.extend(names);
    put(&mut w, header)?;
    for (i, row) in x.rows().enumerate() {
        let mut rec = vec![x.cells[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        put(&mut w, rec)?;
    }
    finish(w)
}

pub fn read_features_csv<R: Read>(r: R) -> Result<FeatureMatrix> {
    let names = feature_names();
    let (header, rows) = read_numeric(r, names.len() + 1)?;
    if header[1..] != names[..] {
        return Err(Error::Parse("feature columns do not match the expected names".into()));
    }
    let cells = rows
        .iter()
        .map(|r| cell_id(r[0], usize::MAX))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
    FeatureMatrix::new(cells, data, names.len())
}

/// Training targets for one source, one row per feature row.
pub fn write_targets_csv<W: Write>(w: W, cells: &[usize], y: &[f64]) -> Result<()> {
    let mut w = writer(w);
    put(&mut w, ["cell", "beta (-)"].map(String::from).to_vec())?;
    for (c, v) in cells.iter().zip(y) {
        put(&mut w, vec![c.to_string(), v.to_string()])?;
    }
    finish(w)
}

pub fn write_predictions_csv<W: Write>(w: W, mesh: &Mesh, records: &[CellPrediction]) -> Result<()> {
    let mut w = writer(w);
    put(
        &mut w,
        [
            "cell",
            "x (L)",
            "y (L)",
            "mu (-)",
            "sigma_mu (-)",
            "sigma_sigma (-)",
            "sigma (-)",
            "beta (-)",
            "active",
        ]
        .map(String::from)
        .to_vec(),
    )?;
    for r in records {
        let [x, y] = mesh.center(r.cell);
        put(
            &mut w,
            vec![
                r.cell.to_string(),
                x.to_string(),
                y.to_string(),
                r.mean.to_string(),
                r.sigma_mu.to_string(),
                r.sigma_sigma.to_string(),
                r.sigma.to_string(),
                r.beta.to_string(),
                u8::from(r.active).to_string(),
            ],
        )?;
    }
    finish(w)
}

pub fn write_lof_csv<W: Write>(w: W, mesh: &Mesh, cells: &[usize], scores: &[f64]) -> Result<()> {
    let mut w = writer(w);
    put(&mut w, ["cell", "x (L)", "y (L)", "lof (-)"].map(String::from).to_vec())?;
    for (&c, s) in cells.iter().zip(scores) {
        let [x, y] = mesh.center(c);
        put(&mut w, vec![c.to_string(), x.to_string(), y.to_string(), s.to_string()])?;
    }
    finish(w)
}

/// Reference samples with columns `x, y, u_ref` and optionally `v_ref`,
/// mapped to their nearest cells.
pub fn read_assimilation_csv<R: Read>(r: R, mesh: &Mesh, source: &str) -> Result<AssimilationData> {
    let (header, rows) = read_numeric(r, 3)?;
    if rows.is_empty() {
        return Err(Error::Parse("assimilation file has no samples".into()));
    }
    let points: Vec<[f64; 2]> = rows.iter().map(|r| [r[0], r[1]]).collect();
    let u: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let v: Option<Vec<f64>> = (header.len() > 3).then(|| rows.iter().map(|r| r[3]).collect());
    AssimilationData::from_points(mesh, &points, &u, v.as_deref(), source)
}

/// Legacy ASCII structured grid with the given cell scalars. Blanked cells
/// are written as zeros and flagged in a `blanked` scalar.
pub fn write_vtk<W: Write>(mut w: W, mesh: &Mesh, title: &str, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = mesh.n_cells();
    if let Some((name, _)) = fields.iter().find(|(_, f)| f.len() != n) {
        return invalid(format!("field {name} does not match the mesh"));
    }
    let xf = mesh.x_faces();
    let yf = mesh.y_faces();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{}", title.replace('\n', " "))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_GRID")?;
    writeln!(w, "DIMENSIONS {} {} 1", xf.len(), yf.len())?;
    writeln!(w, "POINTS {} double", xf.len() * yf.len())?;
    for y in yf {
        for x in xf {
            writeln!(w, "{x} {y} 0")?;
        }
    }
    writeln!(w, "CELL_DATA {n}")?;
    let blanked: Vec<f64> = (0..n).map(|c| f64::from(u8::from(mesh.is_blanked(c)))).collect();
    for (name, f) in fields.iter().copied().chain(std::iter::once(("blanked", &blanked[..]))) {
        writeln!(w, "SCALARS {} double 1", name.replace(' ', "_"))?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for (c, v) in f.iter().enumerate() {
            let v = if mesh.is_blanked(c) || !v.is_finite() { 0.0 } else { *v };
            writeln!(w, "{v}")?;
        }
    }
    Ok(())
}

pub fn write_state_vtk<W: Write>(w: W, mesh: &Mesh, s: &FlowState) -> Result<()> {
    write_vtk(
        w,
        mesh,
        "flow state",
        &[
            ("u", &s.u),
            ("v", &s.v),
            ("p", &s.p),
            ("k", &s.k),
            ("omega", &s.omega),
            ("nu_t", &s.nu_t),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{BoundaryConditions, SolverSettings, TurbulenceModel};

    fn solved() -> (Mesh, FlowState) {
        let mesh = Mesh::channel_1d(16, 1.1, 1.0).unwrap();
        let st = crate::solve_rans(
            &mesh,
            &BoundaryConditions::channel(1.0),
            &CorrectionField::uniform(16),
            &SolverSettings::new(TurbulenceModel::Laminar, 0.1),
        )
        .unwrap();
        (mesh, st)
    }

    #[test]
    fn state_round_trip_is_exact() {
        let (mesh, st) = solved();
        let mut buf = Vec::new();
        write_state_csv(&mut buf, &mesh, &st).unwrap();
        let back = read_state_csv(&buf[..], &mesh, st.nu).unwrap();
        assert_eq!(back.u, st.u);
        assert_eq!(back.nu_t, st.nu_t);
    }

    #[test]
    fn beta_round_trip() {
        let mesh = Mesh::channel_1d(8, 1.0, 1.0).unwrap();
        let b = CorrectionField::from_values((0..8).map(|i| 0.1 * i as f64 + 1e-17).collect()).unwrap();
        let mut buf = Vec::new();
        write_beta_csv(&mut buf, &mesh, &b).unwrap();
        assert_eq!(read_beta_csv(&buf[..], 8).unwrap(), b);
    }

    #[test]
    fn features_round_trip() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..52).map(|j| (i * 52 + j) as f64 / 7.0).collect()).collect();
        let x = FeatureMatrix::from_rows(vec![4, 9, 2], &rows).unwrap();
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &x).unwrap();
        assert_eq!(read_features_csv(&buf[..]).unwrap(), x);
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        let mesh = Mesh::channel_1d(8, 1.0, 1.0).unwrap();
        let text = "cell,x,y,u,v,p,k,omega,nu_t\n0,0,0,1,0,0,0,1,0\n1,0,0,abc,0,0,0,1,0\n";
        assert!(matches!(read_state_csv(text.as_bytes(), &mesh, 1.0), Err(Error::Parse(_))));
    }

    #[test]
    fn vtk_counts() {
        let (mesh, st) = solved();
        let mut buf = Vec::new();
        write_state_vtk(&mut buf, &mesh, &st).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("DIMENSIONS 2 17 1"));
        assert!(text.contains("CELL_DATA 16"));
    }
}
