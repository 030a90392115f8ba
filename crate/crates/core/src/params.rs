//! Named traversal of parameter structs.
//!
//! Every parameter-bearing type lists its matrices under stable dotted
//! names (`fu.w_ix`, `w_out`, ...). The same traversal drives flattening
//! into a [`ParamSet`], checkpoint schema checks and gradient accumulation.

use crate::error::{Error, Result};
use crate::numkit::{Matrix, ParamSet};

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix));

    fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        self.visit("", &mut |name, m| {
            set.insert(name, m.clone());
        });
        set
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.data().len());
        n
    }

    /// Overwrites every matrix from `set`. Names and shapes must match
    /// exactly; a missing or surplus name is a schema error.
    fn load_param_set(&mut self, set: &ParamSet) -> Result<()> {
        let mut seen = 0usize;
        let mut failure: Option<Error> = None;
        self.visit_mut("", &mut |name, m| {
            if failure.is_some() {
                return;
            }
            match set.get(&name) {
                None => failure = Some(Error::Schema(format!("missing parameter `{name}`"))),
                Some(src) if src.shape() != m.shape() => {
                    failure = Some(Error::Schema(format!(
                        "parameter `{name}` has shape {}x{}, expected {}x{}",
                        src.rows(),
                        src.cols(),
                        m.rows(),
                        m.cols()
                    )))
                }
                Some(src) => {
                    m.data_mut().copy_from_slice(src.data());
                    seen += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != set.len() {
            let known = self.param_names();
            let extra = set
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Schema(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// `self += other`, matched by name. Both sides must share a layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut sources = Vec::new();
        other.visit("", &mut |_, m| sources.push(m));
        let mut it = sources.into_iter();
        self.visit_mut("", &mut |_, m| {
            let src = it.next().expect("identical layouts");
            for (a, b) in m.data_mut().iter_mut().zip(src.data()) {
                *a += b;
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
