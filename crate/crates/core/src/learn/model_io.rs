//! Plain-text model files.
//!
//! Floats are written in shortest round-trip exponent form, so a decoded
//! model scores bit-identically to the one that was encoded.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::ensemble::{EnsembleConfig, EnsembleModel, KernelClassifier, ScaleInfo};
use super::klr::KlrFit;
use super::subag::SubagSubset;
use super::{LearnError, Matrix};
use crate::Real;

pub const MODEL_MAGIC: &str = "FPDS-MODEL v1";

fn push_list<I: IntoIterator<Item = String>>(out: &mut String, tag: &str, items: I) {
    out.push_str(tag);
    for item in items {
        out.push(' ');
        out.push_str(&item);
    }
    out.push('\n');
}

fn float<T: Real>(v: T) -> String {
    format!("{:e}", v.as_f64())
}

pub fn encode_model<T: Real>(model: &EnsembleModel<T>) -> String {
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push('\n');
    let config = serde_json::to_string(&model.config).expect("config serializes");
    let _ = writeln!(out, "config {config}");
    let _ = writeln!(out, "scalar {}", std::mem::size_of::<T>() * 8);
    let _ = writeln!(out, "training_images {}", model.training_image_ids.len());
    for id in &model.training_image_ids {
        let _ = writeln!(out, "{id}");
    }
    let _ = writeln!(out, "scales {}", model.scales.len());
    for s in &model.scales {
        push_list(
            &mut out,
            &format!("scale {}", s.scale_m),
            s.patch_ids.iter().map(u32::to_string),
        );
    }
    let _ = writeln!(out, "subsets {}", model.subsets.len());
    for s in &model.subsets {
        push_list(
            &mut out,
            &format!("subset {}", s.subset_index),
            s.member_indices.iter().map(usize::to_string),
        );
    }
    let _ = writeln!(out, "classifiers {}", model.classifiers.len());
    for c in &model.classifiers {
        let fit = &c.fit;
        let _ = writeln!(
            out,
            "classifier {} {} {} {} {} {} {} {} {}",
            c.scale_index,
            c.subset_index,
            u8::from(fit.converged),
            fit.iterations,
            float(fit.bias),
            float(fit.bandwidth),
            float(fit.grad_norm),
            fit.support_vectors.rows(),
            fit.support_vectors.cols(),
        );
        push_list(&mut out, "selected", c.selected_feature_ids.iter().map(u32::to_string));
        push_list(&mut out, "columns", c.selected_columns.iter().map(usize::to_string));
        push_list(&mut out, "alpha", fit.dual_weights.iter().map(|&v| float(v)));
        push_list(&mut out, "trace", fit.objective_trace.iter().map(|&v| float(v)));
        for r in 0..fit.support_vectors.rows() {
            push_list(&mut out, "sv", fit.support_vectors.row(r).iter().map(|&v| float(v)));
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn corrupt(&self, message: impl Into<String>) -> LearnError {
        LearnError::Corrupt {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str, LearnError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.corrupt("unexpected end of file"))
            }
        }
    }

    /// Next line, which must start with `tag`; returns the remaining fields.
    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>, LearnError> {
        let line = self.next_line()?;
        let mut fields = line.split(' ');
        if fields.next() != Some(tag) {
            return Err(self.corrupt(format!("expected '{tag}'")));
        }
        Ok(fields.filter(|f| !f.is_empty()).collect())
    }

    fn parse<V: FromStr>(&self, field: &str) -> Result<V, LearnError> {
        field
            .parse()
            .map_err(|_| self.corrupt(format!("cannot parse {field:?}")))
    }

    fn parse_all<V: FromStr>(&self, fields: &[&str]) -> Result<Vec<V>, LearnError> {
        fields.iter().map(|f| self.parse(f)).collect()
    }

    fn floats<T: Real>(&self, fields: &[&str]) -> Result<Vec<T>, LearnError> {
        Ok(self.parse_all::<f64>(fields)?.into_iter().map(T::of).collect())
    }

    fn count(&mut self, tag: &str) -> Result<usize, LearnError> {
        let fields = self.tagged(tag)?;
        match fields.as_slice() {
            [n] => self.parse(n),
            _ => Err(self.corrupt(format!("'{tag}' takes one count"))),
        }
    }
}

pub fn decode_model<T: Real>(text: &str) -> Result<EnsembleModel<T>, LearnError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let magic = lines.next_line().map_err(|_| LearnError::ModelVersion(String::new()))?;
    if magic != MODEL_MAGIC {
        return Err(LearnError::ModelVersion(magic.to_string()));
    }
    let config_line = lines.next_line()?;
    let json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| lines.corrupt("expected 'config'"))?;
    let config: EnsembleConfig =
        serde_json::from_str(json).map_err(|e| lines.corrupt(e.to_string()))?;
    let bits = lines.count("scalar")?;
    if bits != std::mem::size_of::<T>() * 8 {
        return Err(lines.corrupt(format!("model stores {bits}-bit scalars")));
    }

    let n_images = lines.count("training_images")?;
    let mut training_image_ids = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        training_image_ids.push(lines.next_line()?.to_string());
    }

    let n_scales = lines.count("scales")?;
    let mut scales = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        let fields = lines.tagged("scale")?;
        let (m, ids) = fields.split_first().ok_or_else(|| lines.corrupt("missing scale"))?;
        scales.push(ScaleInfo {
            scale_m: lines.parse(m)?,
            patch_ids: lines.parse_all(ids)?,
        });
    }

    let n_subsets = lines.count("subsets")?;
    let mut subsets = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let fields = lines.tagged("subset")?;
        let (f, members) = fields.split_first().ok_or_else(|| lines.corrupt("missing subset index"))?;
        let member_indices: Vec<usize> = lines.parse_all(members)?;
        if member_indices.iter().any(|&i| i >= n_images) {
            return Err(lines.corrupt("subset member out of range"));
        }
        subsets.push(SubagSubset {
            subset_index: lines.parse(f)?,
            member_indices,
        });
    }

    let n_classifiers = lines.count("classifiers")?;
    let mut classifiers = Vec::with_capacity(n_classifiers);
    for _ in 0..n_classifiers {
        let head = lines.tagged("classifier")?;
        if head.len() != 9 {
            return Err(lines.corrupt("classifier header needs 9 fields"));
        }
        let scale_index: usize = lines.parse(head[0])?;
        let subset_index: usize = lines.parse(head[1])?;
        if scale_index >= n_scales || subset_index >= n_subsets {
            return Err(lines.corrupt("classifier index out of range"));
        }
        let converged = match head[2] {
            "0" => false,
            "1" => true,
            _ => return Err(lines.corrupt("converged flag must be 0 or 1")),
        };
        let iterations: usize = lines.parse(head[3])?;
        let bias = T::of(lines.parse(head[4])?);
        let bandwidth = T::of(lines.parse(head[5])?);
        let grad_norm = T::of(lines.parse(head[6])?);
        let rows: usize = lines.parse(head[7])?;
        let cols: usize = lines.parse(head[8])?;

        let selected_fields = lines.tagged("selected")?;
        let selected_feature_ids: Vec<u32> = lines.parse_all(&selected_fields)?;
        let columns_fields = lines.tagged("columns")?;
        let selected_columns: Vec<usize> = lines.parse_all(&columns_fields)?;
        let alpha_fields = lines.tagged("alpha")?;
        let dual_weights: Vec<T> = lines.floats(&alpha_fields)?;
        let trace_fields = lines.tagged("trace")?;
        let objective_trace: Vec<T> = lines.floats(&trace_fields)?;
        let width = scales[scale_index].patch_ids.len();
        if selected_columns.len() != cols
            || selected_feature_ids.len() != cols
            || dual_weights.len() != rows
            || selected_columns.iter().any(|&c| c >= width)
        {
            return Err(lines.corrupt("classifier shape mismatch"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let sv_fields = lines.tagged("sv")?;
            let row: Vec<T> = lines.floats(&sv_fields)?;
            if row.len() != cols {
                return Err(lines.corrupt("support vector width mismatch"));
            }
            data.extend(row);
        }
        let support_vectors = Matrix::from_vec(rows, cols, data).expect("length checked");
        classifiers.push(KernelClassifier {
            scale_index,
            subset_index,
            selected_feature_ids,
            selected_columns,
            fit: KlrFit {
                support_vectors,
                dual_weights,
                bias,
                bandwidth,
                converged,
                iterations,
                grad_norm,
                objective_trace,
            },
        });
    }
    if lines.next_line()? != "end" {
        return Err(lines.corrupt("expected 'end'"));
    }
    Ok(EnsembleModel {
        config,
        scales,
        subsets,
        classifiers,
        training_image_ids,
    })
}

pub fn save_model<T: Real>(model: &EnsembleModel<T>, path: &Path) -> Result<(), LearnError> {
    std::fs::write(path, encode_model(model)).map_err(|source| LearnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model<T: Real>(path: &Path) -> Result<EnsembleModel<T>, LearnError> {
    let text = std::fs::read_to_string(path).map_err(|source| LearnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&text)
}
