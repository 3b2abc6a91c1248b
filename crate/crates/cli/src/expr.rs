//! JSON expression files: `{"sum": [{"leaf": "a.tvkp"}, {"neg": {"leaf": "b.tvkp"}},
//! {"scaled": [0.5, {"leaf": "c.tvkp"}]}]}`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use taskvec::tensor_store::Digest;
use taskvec::vector_arith::{load_task_vector, ArithExpr};

use crate::exit::{CliResult, Failure, OrExit, CONFIG};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExprFile {
    Leaf(PathBuf),
    Neg(Box<ExprFile>),
    Scaled(f64, Box<ExprFile>),
    Sum(Vec<ExprFile>),
}

impl ExprFile {
    pub fn parse(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Leaf paths in order of appearance.
    pub fn leaves(&self) -> Vec<&Path> {
        match self {
            ExprFile::Leaf(p) => vec![p.as_path()],
            ExprFile::Neg(e) | ExprFile::Scaled(_, e) => e.leaves(),
            ExprFile::Sum(es) => es.iter().flat_map(|e| e.leaves()).collect(),
        }
    }

    /// Loads every leaf (relative paths resolve against `dir`) and checks
    /// that all of them were built for `arch`.
    pub fn load(&self, dir: &Path, arch: Digest) -> CliResult<ArithExpr> {
        Ok(match self {
            ExprFile::Leaf(p) => {
                let path = dir.join(p);
                let (t, digest) = load_task_vector(&path).or_exit(CONFIG, || format!("cannot load {}", path.display()))?;
                if digest != arch {
                    return Err(Failure::compat(format!(
                        "{} was built for architecture {digest}, base is {arch}",
                        path.display()
                    )));
                }
                ArithExpr::leaf(t)
            }
            ExprFile::Neg(e) => ArithExpr::neg(e.load(dir, arch)?),
            ExprFile::Scaled(c, e) => ArithExpr::scaled(*c, e.load(dir, arch)?),
            ExprFile::Sum(es) => {
                if es.is_empty() {
                    return Err(Failure::config("empty sum in expression"));
                }
                ArithExpr::Sum(es.iter().map(|e| e.load(dir, arch)).collect::<CliResult<_>>()?)
            }
        })
    }
}
