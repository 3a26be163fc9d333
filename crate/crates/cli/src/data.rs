use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use flars_core::funcrep::{FunctionalSample, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Dataset manifest. Relative paths resolve against the manifest's own
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub response_file: PathBuf,
    #[serde(default = "default_subject")]
    pub subject_column: String,
    #[serde(default = "default_visit")]
    pub visit_column: String,
    #[serde(default = "default_response")]
    pub response_column: String,
    #[serde(default)]
    pub scalar_file: Option<PathBuf>,
    #[serde(default)]
    pub functional: Vec<FunctionalEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalEntry {
    pub id: String,
    pub curve_file: PathBuf,
    pub grid_file: PathBuf,
}

fn default_subject() -> String {
    "subject".into()
}

fn default_visit() -> String {
    "visit".into()
}

fn default_response() -> String {
    "response".into()
}

/// A CSV file held as text cells; parsing to numbers happens per column so
/// that errors can name the offending cell.
struct Table {
    path: PathBuf,
    header: Option<Vec<String>>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path, has_header: bool) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = if has_header {
        let h = rd
            .headers()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let mut seen = HashSet::new();
        if let Some(d) = h.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(CliError::data(format!("{}: duplicate column `{d}`", path.display())));
        }
        Some(h)
    } else {
        None
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na")
}

/// Parses one cell; `None` marks a missing value. Row numbers in messages
/// count data rows from 1.
fn parse_cell(table: &Table, row: usize, col: usize) -> Result<Option<f64>, CliError> {
    let cell = &table.rows[row][col];
    if is_missing(cell) {
        return Ok(None);
    }
    let col_name = match &table.header {
        Some(h) => format!("column `{}`", h[col]),
        None => format!("column {}", col + 1),
    };
    let v: f64 = cell.parse().map_err(|_| {
        CliError::data(format!(
            "{}: row {}, {col_name}: cannot parse `{cell}` as a number",
            table.path.display(),
            row + 1
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::data(format!(
            "{}: row {}, {col_name}: non-finite value `{cell}`",
            table.path.display(),
            row + 1
        )));
    }
    Ok(Some(v))
}

fn column_index(table: &Table, name: &str) -> Option<usize> {
    table.header.as_ref()?.iter().position(|c| c == name)
}

fn numeric_column(table: &Table, col: usize) -> Result<Vec<Option<f64>>, CliError> {
    (0..table.rows.len()).map(|r| parse_cell(table, r, col)).collect()
}

/// What a command needs from the dataset.
#[derive(Clone, Debug, Default)]
pub struct Needs {
    pub response: bool,
    /// `None` loads every variable in the manifest.
    pub variables: Option<Vec<String>>,
    pub phi_columns: Vec<String>,
}

/// Complete cases of the requested columns.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub subjects: Vec<String>,
    pub visits: Vec<String>,
    pub response: Option<DVector<f64>>,
    pub functional: Vec<(String, FunctionalSample)>,
    pub scalar: Vec<(String, DVector<f64>)>,
    pub phi: DMatrix<f64>,
    pub n_dropped: usize,
}

impl LoadedData {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Grid shared by every functional variable.
    pub fn grid(&self) -> Option<&TimeGrid> {
        self.functional.first().map(|(_, x)| x.grid())
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| CliError::data(format!("invalid manifest {}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        if let Some(d) = m.functional.iter().find(|f| !seen.insert(f.id.as_str())) {
            return Err(CliError::data(format!("manifest lists functional variable `{}` twice", d.id)));
        }
        Ok(m)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn scalar_table(&self) -> Result<Option<Table>, CliError> {
        self.scalar_file.as_ref().map(|p| read_table(&self.resolve(p), true)).transpose()
    }

    /// Names of every candidate variable, functional first.
    pub fn variable_ids(&self) -> Result<Vec<String>, CliError> {
        let mut ids: Vec<String> = self.functional.iter().map(|f| f.id.clone()).collect();
        if let Some(t) = self.scalar_table()? {
            ids.extend(t.header.unwrap_or_default());
        }
        Ok(ids)
    }

    /// Reads the requested columns and keeps the rows where all of them are
    /// present. Referenced variables or columns that the manifest does not
    /// provide are a schema error listing every missing name.
    pub fn load_data(&self, needs: &Needs) -> Result<LoadedData, CliError> {
        let resp = read_table(&self.resolve(&self.response_file), true)?;
        let scal = self.scalar_table()?;
        let n = resp.rows.len();

        let subj_col = column_index(&resp, &self.subject_column);
        let visit_col = column_index(&resp, &self.visit_column);
        let resp_col = column_index(&resp, &self.response_column);

        let scalar_names: Vec<String> = scal.as_ref().and_then(|t| t.header.clone()).unwrap_or_default();
        let functional_names: Vec<&str> = self.functional.iter().map(|f| f.id.as_str()).collect();
        let wanted: Vec<String> = match &needs.variables {
            Some(v) => v.clone(),
            None => functional_names
                .iter()
                .map(|s| s.to_string())
                .chain(scalar_names.iter().cloned())
                .collect(),
        };

        let mut missing = Vec::new();
        if subj_col.is_none() {
            missing.push(format!("response column `{}`", self.subject_column));
        }
        if visit_col.is_none() {
            missing.push(format!("response column `{}`", self.visit_column));
        }
        if needs.response && resp_col.is_none() {
            missing.push(format!("response column `{}`", self.response_column));
        }
        for id in &wanted {
            if !functional_names.contains(&id.as_str()) && !scalar_names.contains(id) {
                missing.push(format!("variable `{id}`"));
            }
        }
        for c in &needs.phi_columns {
            if column_index(&resp, c).is_none() && !scalar_names.contains(c) {
                missing.push(format!("covariate column `{c}`"));
            }
        }
        if !missing.is_empty() {
            return Err(CliError::schema(format!("dataset is missing {}", missing.join(", "))));
        }
        if let Some(t) = &scal {
            if t.rows.len() != n {
                return Err(CliError::data(format!(
                    "{} has {} rows, response file has {n}",
                    t.path.display(),
                    t.rows.len()
                )));
            }
        }

        let mut keep = vec![true; n];
        let mark = |col: &[Option<f64>], keep: &mut Vec<bool>| {
            for (k, v) in keep.iter_mut().zip(col) {
                if v.is_none() {
                    *k = false;
                }
            }
        };

        let subjects: Vec<String> = resp.rows.iter().map(|r| r[subj_col.unwrap()].clone()).collect();
        let visits: Vec<String> = resp.rows.iter().map(|r| r[visit_col.unwrap()].clone()).collect();
        for (k, s) in keep.iter_mut().zip(&subjects) {
            if is_missing(s) {
                *k = false;
            }
        }

        let response = match (needs.response, resp_col) {
            (true, Some(c)) => {
                let col = numeric_column(&resp, c)?;
                mark(&col, &mut keep);
                Some(col)
            }
            _ => None,
        };

        let mut phi_cols = Vec::with_capacity(needs.phi_columns.len());
        for c in &needs.phi_columns {
            let col = match column_index(&resp, c) {
                Some(j) => numeric_column(&resp, j)?,
                None => {
                    let t = scal.as_ref().unwrap();
                    numeric_column(t, column_index(t, c).unwrap())?
                }
            };
            mark(&col, &mut keep);
            phi_cols.push(col);
        }

        let mut scalar_cols = Vec::new();
        let mut curves = Vec::new();
        for id in &wanted {
            if let Some(entry) = self.functional.iter().find(|f| &f.id == id) {
                let (grid, rows) = self.read_curve(entry, n)?;
                for (k, r) in keep.iter_mut().zip(&rows) {
                    if r.iter().any(Option::is_none) {
                        *k = false;
                    }
                }
                curves.push((id.clone(), grid, rows));
            } else {
                let t = scal.as_ref().unwrap();
                let col = numeric_column(t, column_index(t, id).unwrap())?;
                mark(&col, &mut keep);
                scalar_cols.push((id.clone(), col));
            }
        }

        let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let n_dropped = n - rows.len();
        if n_dropped > 0 {
            log::warn!("dropped {n_dropped} of {n} rows with missing values");
        }

        let take = |col: &[Option<f64>]| DVector::from_iterator(rows.len(), rows.iter().map(|&i| col[i].unwrap()));
        let mut functional = Vec::with_capacity(curves.len());
        let mut shared_grid: Option<TimeGrid> = None;
        for (id, grid, vals) in curves {
            match &shared_grid {
                Some(g) if g.points() != grid.points() => {
                    return Err(CliError::data(format!(
                        "functional variable `{id}` is sampled on a different grid from the others"
                    )));
                }
                None => shared_grid = Some(grid.clone()),
                _ => {}
            }
            let q = grid.len();
            let m = DMatrix::from_fn(rows.len(), q, |i, j| vals[rows[i]][j].unwrap());
            functional.push((id, FunctionalSample::new(m, grid)?));
        }
        let phi = DMatrix::from_fn(rows.len(), phi_cols.len(), |i, j| phi_cols[j][rows[i]].unwrap());
        Ok(LoadedData {
            subjects: rows.iter().map(|&i| subjects[i].clone()).collect(),
            visits: rows.iter().map(|&i| visits[i].clone()).collect(),
            response: response.map(|c| take(&c)),
            scalar: scalar_cols.into_iter().map(|(id, c)| (id, take(&c))).collect(),
            functional,
            phi,
            n_dropped,
        })
    }

    fn read_curve(&self, entry: &FunctionalEntry, n: usize) -> Result<(TimeGrid, Vec<Vec<Option<f64>>>), CliError> {
        let gt = read_table(&self.resolve(&entry.grid_file), false)?;
        if gt.rows.iter().any(|r| r.len() != 1) {
            return Err(CliError::data(format!("{}: grid file must have one column", gt.path.display())));
        }
        let mut points = Vec::with_capacity(gt.rows.len());
        for r in 0..gt.rows.len() {
            points.push(parse_cell(&gt, r, 0)?.ok_or_else(|| {
                CliError::data(format!("{}: row {}: missing grid point", gt.path.display(), r + 1))
            })?);
        }
        let grid = TimeGrid::new(points)
            .map_err(|e| CliError::data(format!("{}: {e}", gt.path.display())))?;
        let ct = read_table(&self.resolve(&entry.curve_file), false)?;
        if ct.rows.len() != n {
            return Err(CliError::data(format!(
                "{} has {} rows, response file has {n}",
                ct.path.display(),
                ct.rows.len()
            )));
        }
        if let Some(r) = ct.rows.iter().position(|r| r.len() != grid.len()) {
            return Err(CliError::data(format!(
                "{}: row {} has {} values, grid has {}",
                ct.path.display(),
                r + 1,
                ct.rows[r].len(),
                grid.len()
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let mut row = Vec::with_capacity(grid.len());
            for c in 0..grid.len() {
                row.push(parse_cell(&ct, r, c)?);
            }
            rows.push(row);
        }
        Ok((grid, rows))
    }
}

/// Writes a dataset in manifest layout under `dir`.
pub fn export_dataset(
    dir: &Path,
    subjects: &[String],
    visits: &[String],
    response: &DVector<f64>,
    functional: &[(String, FunctionalSample)],
    scalar: &[(String, DVector<f64>)],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let csv_err = |e: csv::Error| CliError::generic(e.to_string());
    crate::output::write_atomic(&dir.join("response.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["subject", "visit", "response"]).map_err(csv_err)?;
        for i in 0..response.len() {
            wr.write_record([subjects[i].as_str(), visits[i].as_str(), &response[i].to_string()])
                .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mut manifest = Manifest {
        response_file: "response.csv".into(),
        subject_column: default_subject(),
        visit_column: default_visit(),
        response_column: default_response(),
        scalar_file: None,
        functional: Vec::new(),
        base_dir: PathBuf::new(),
    };
    if !scalar.is_empty() {
        crate::output::write_atomic(&dir.join("scalars.csv"), |w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(scalar.iter().map(|(id, _)| id.as_str())).map_err(csv_err)?;
            for i in 0..response.len() {
                wr.write_record(scalar.iter().map(|(_, z)| z[i].to_string())).map_err(csv_err)?;
            }
            wr.flush()?;
            Ok(())
        })?;
        manifest.scalar_file = Some("scalars.csv".into());
    }
    let mut grids: HashMap<Vec<u64>, String> = HashMap::new();
    for (id, x) in functional {
        let key: Vec<u64> = x.grid().points().iter().map(|t| t.to_bits()).collect();
        let grid_name = match grids.get(&key) {
            Some(name) => name.clone(),
            None => {
                let name = format!("grid{}.csv", grids.len());
                crate::output::write_atomic(&dir.join(&name), |w| {
                    let mut wr = csv::Writer::from_writer(w);
                    for t in x.grid().points() {
                        wr.write_record([t.to_string()]).map_err(csv_err)?;
                    }
                    wr.flush()?;
                    Ok(())
                })?;
                grids.insert(key, name.clone());
                name
            }
        };
        let curve_name = format!("curve_{id}.csv");
        crate::output::write_atomic(&dir.join(&curve_name), |w| {
            let mut wr = csv::Writer::from_writer(w);
            for row in x.values().row_iter() {
                wr.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
            }
            wr.flush()?;
            Ok(())
        })?;
        manifest.functional.push(FunctionalEntry {
            id: id.clone(),
            curve_file: curve_name.into(),
            grid_file: grid_name.into(),
        });
    }
    let text = toml::to_string(&manifest).map_err(|e| CliError::generic(e.to_string()))?;
    crate::output::write_atomic(&dir.join("manifest.toml"), |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    fn fixture(dir: &Path) -> Manifest {
        write(dir, "resp.csv", "subject,visit,response\na,1,0.5\na,2,NA\nb,1,1.5\n");
        write(dir, "scal.csv", "z1,z2\n1,2\n3,4\n5,\n");
        write(dir, "grid.csv", "0\n0.5\n1\n");
        write(dir, "x1.csv", "1,2,3\n4,5,6\n7,8,9\n");
        write(
            dir,
            "m.toml",
            "response_file = \"resp.csv\"\nscalar_file = \"scal.csv\"\n\
             [[functional]]\nid = \"x1\"\ncurve_file = \"x1.csv\"\ngrid_file = \"grid.csv\"\n",
        );
        Manifest::load(&dir.join("m.toml")).unwrap()
    }

    #[test]
    fn rows_with_missing_values_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        let d = m
            .load_data(&Needs {
                response: true,
                ..Needs::default()
            })
            .unwrap();
        assert_eq!(d.n(), 1);
        assert_eq!(d.n_dropped, 2);
        assert_eq!(d.subjects, vec!["a"]);
        assert_eq!(d.functional[0].1.values()[(0, 2)], 3.0);

        // z2 unused: only the missing response drops a row.
        let d = m
            .load_data(&Needs {
                response: true,
                variables: Some(vec!["x1".into(), "z1".into()]),
                phi_columns: vec!["visit".into()],
            })
            .unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.phi.column(0).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn unknown_variables_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        let e = m
            .load_data(&Needs {
                response: false,
                variables: Some(vec!["x9".into(), "z1".into(), "z7".into()]),
                phi_columns: vec![],
            })
            .unwrap_err();
        assert_eq!(e.code, crate::error::EXIT_SCHEMA);
        assert!(e.message.contains("x9") && e.message.contains("z7"), "{}", e.message);
    }

    #[test]
    fn bad_cells_name_their_location() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        write(dir.path(), "scal.csv", "z1,z2\n1,2\n3,abc\n5,6\n");
        let e = m.load_data(&Needs::default()).unwrap_err();
        assert_eq!(e.code, crate::error::EXIT_DATA);
        assert!(e.message.contains("row 2") && e.message.contains("z2"), "{}", e.message);
        write(dir.path(), "scal.csv", "z1,z2\n1,2\n3,inf\n5,6\n");
        let e = m.load_data(&Needs::default()).unwrap_err();
        assert!(e.message.contains("non-finite"), "{}", e.message);
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TimeGrid::linspace(0.0, 1.0, 4).unwrap();
        let x = FunctionalSample::new(DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1), grid).unwrap();
        let y = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let subjects: Vec<String> = vec!["s1".into(), "s2".into(), "s3".into()];
        let visits: Vec<String> = vec!["1".into(); 3];
        export_dataset(
            dir.path(),
            &subjects,
            &visits,
            &y,
            &[("f1".into(), x.clone())],
            &[("s1".into(), y.clone())],
        )
        .unwrap();
        let m = Manifest::load(&dir.path().join("manifest.toml")).unwrap();
        let d = m
            .load_data(&Needs {
                response: true,
                ..Needs::default()
            })
            .unwrap();
        assert_eq!(d.response.unwrap(), y);
        assert_eq!(d.functional[0].1.values(), x.values());
        assert_eq!(d.scalar[0].1, y);
    }
}
