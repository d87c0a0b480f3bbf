//! CSV emission with fixed schemas and 17-significant-digit formatting.

use std::io::Write;
use std::path::Path;

use pbgd_core::diagnostics::{FlatnessReport, GapReport};
use pbgd_core::solvers::IterateRecord;

use crate::HarnessError;

/// 17 significant decimal digits: round-trips every f64 exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    file.write_all(contents.as_bytes())
        .map_err(|e| HarnessError::io(path, e))
}

fn vector_header(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("{prefix}{i}")).collect()
}

/// Schema: `t,x...,y_gamma...,y_g...,f_val,g_gap,update_norm,ll_grad_evals,wall_nanos`
/// with vector columns expanded per coordinate and empty cells for absent
/// optional fields.
pub fn trajectory_csv(records: &[IterateRecord], dim_x: usize, dim_y: usize) -> String {
    let mut header = vec!["t".to_string()];
    header.extend(vector_header("x", dim_x));
    header.extend(vector_header("y_gamma", dim_y));
    header.extend(vector_header("y_g", dim_y));
    header.extend(
        ["f_val", "g_gap", "update_norm", "ll_grad_evals", "wall_nanos"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut out = header.join(",");
    out.push('\n');
    for r in records {
        let mut cells = vec![r.t.to_string()];
        cells.extend(r.x.iter().map(|&v| fmt17(v)));
        cells.extend(r.y_gamma.iter().map(|&v| fmt17(v)));
        match &r.y_g {
            Some(y) => cells.extend(y.iter().map(|&v| fmt17(v))),
            None => cells.extend(std::iter::repeat_n(String::new(), dim_y)),
        }
        cells.push(fmt17(r.f_val));
        cells.push(r.g_gap.map(fmt17).unwrap_or_default());
        cells.push(fmt17(r.update_norm));
        cells.push(r.ll_grad_evals.to_string());
        cells.push(r.wall_nanos.to_string());
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Schema: `gamma,phi,F_gamma,value_gap,y_dist,lip_bound,flat_bound`.
pub fn gaps_csv(reports: &[GapReport]) -> String {
    let mut out = String::from("gamma,phi,F_gamma,value_gap,y_dist,lip_bound,flat_bound\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt17(r.gamma),
            fmt17(r.phi),
            fmt17(r.f_gamma),
            fmt17(r.value_gap),
            fmt17(r.y_dist),
            fmt17(r.lip_bound),
            fmt17(r.flat_bound),
        ));
    }
    out
}

/// Schema: `x...,delta_x,f_gap,dist`.
pub fn flatness_csv(report: &FlatnessReport, dim_x: usize) -> String {
    let mut header = vector_header("x", dim_x);
    header.extend(["delta_x", "f_gap", "dist"].iter().map(|s| s.to_string()));
    let mut out = header.join(",");
    out.push('\n');
    for p in &report.points {
        let mut cells: Vec<String> = p.x.iter().map(|&v| fmt17(v)).collect();
        cells.push(fmt17(p.delta_x));
        cells.push(fmt17(p.f_gap));
        cells.push(fmt17(p.dist));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Drops the named columns from a CSV body; used to compare runs modulo the
/// wall-clock column.
pub fn strip_columns(csv: &str, drop: &[&str]) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let names: Vec<&str> = header.split(',').collect();
    let keep: Vec<usize> = (0..names.len())
        .filter(|&i| !drop.contains(&names[i]))
        .collect();
    let mut out = String::new();
    let project = |line: &str| -> String {
        let cells: Vec<&str> = line.split(',').collect();
        keep.iter()
            .map(|&i| cells.get(i).copied().unwrap_or(""))
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&project(header));
    out.push('\n');
    for line in lines {
        out.push_str(&project(line));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_round_trips() {
        for v in [0.0, -1.5, std::f64::consts::PI, 1e-300, -2.5e17] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn trajectory_schema_and_empty_cells() {
        let rec = IterateRecord {
            t: 3,
            x: vec![1.0],
            y_gamma: vec![2.0],
            y_g: None,
            f_val: 0.5,
            g_gap: None,
            update_norm: 0.25,
            ll_grad_evals: 7,
            wall_nanos: 99,
        };
        let csv = trajectory_csv(&[rec], 1, 1);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x0,y_gamma0,y_g0,f_val,g_gap,update_norm,ll_grad_evals,wall_nanos"
        );
        let row = lines.next().unwrap();
        assert!(row.contains(",,"), "empty optional cells expected: {row}");
        assert!(row.starts_with("3,"));
        assert!(row.ends_with(",7,99"));
    }

    #[test]
    fn strip_columns_removes_wall_clock() {
        let csv = "a,b,wall_nanos\n1,2,3\n4,5,6\n";
        assert_eq!(strip_columns(csv, &["wall_nanos"]), "a,b\n1,2\n4,5\n");
    }
}
