use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which sequence positions FiLM touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilmScope {
    /// Row 0 only.
    Cls,
    /// Every position.
    AllTokens,
}

/// FiLM parameters for one adapter, each a `1 x dim` node.
#[derive(Debug, Clone, Copy)]
pub struct FilmVars {
    pub gamma_mid: Var,
    pub beta_mid: Var,
    pub gamma_out: Var,
    pub beta_out: Var,
}

/// `γ ⊙ h + β` on the rows selected by `scope`. Other rows are passed
/// through untouched.
pub fn film_apply(g: &mut Graph, h: Var, gamma: Var, beta: Var, scope: FilmScope) -> Result<Var> {
    let rows = g.value(h).dims2().0;
    match scope {
        FilmScope::AllTokens => {
            let m = g.mul_row(h, gamma)?;
            g.add_row(m, beta)
        }
        FilmScope::Cls => {
            let head = g.slice_rows(h, 0, 1)?;
            let m = g.mul_row(head, gamma)?;
            let m = g.add_row(m, beta)?;
            if rows == 1 {
                return Ok(m);
            }
            let rest = g.slice_rows(h, 1, rows)?;
            g.concat_rows(&[m, rest])
        }
    }
}

/// Concrete FiLM parameters for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationParams {
    pub gamma_mid: Vec<f64>,
    pub beta_mid: Vec<f64>,
    pub gamma_out: Vec<f64>,
    pub beta_out: Vec<f64>,
}

impl AdaptationParams {
    pub fn identity(bottleneck: usize, model_dim: usize) -> Self {
        Self {
            gamma_mid: vec![1.0; bottleneck],
            beta_mid: vec![0.0; bottleneck],
            gamma_out: vec![1.0; model_dim],
            beta_out: vec![0.0; model_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.gamma_mid, &self.beta_mid, &self.gamma_out, &self.beta_out]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_vars(&self, g: &mut Graph) -> Result<FilmVars> {
        if self.gamma_mid.len() != self.beta_mid.len() || self.gamma_out.len() != self.beta_out.len() {
            return Err(Error::Input("gamma/beta length mismatch".into()));
        }
        let mut c = |v: &Vec<f64>| g.constant(Tensor::row(v.clone()));
        Ok(FilmVars {
            gamma_mid: c(&self.gamma_mid)?,
            beta_mid: c(&self.beta_mid)?,
            gamma_out: c(&self.gamma_out)?,
            beta_out: c(&self.beta_out)?,
        })
    }

    pub fn from_vars(g: &Graph, f: &FilmVars) -> Self {
        let v = |x: Var| g.value(x).data().to_vec();
        Self {
            gamma_mid: v(f.gamma_mid),
            beta_mid: v(f.beta_mid),
            gamma_out: v(f.gamma_out),
            beta_out: v(f.beta_out),
        }
    }
}
