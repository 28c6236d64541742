//! Dense log-domain factors over sorted variable lists, with the broadcast,
//! marginalization and conditioning primitives message passing needs.

/// logsumexp over a slice with max-subtraction.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// A table of log-values over the cross product of `vars`, row-major with the
/// first variable most significant. `vars` are universe indices, sorted
/// ascending.
#[derive(Debug, Clone)]
pub struct Factor {
    pub vars: Vec<usize>,
    pub dims: Vec<usize>,
    pub table: Vec<f64>,
}

impl Factor {
    /// Constant-one factor (all log-values zero).
    pub fn zeros(vars: Vec<usize>, dims: Vec<usize>) -> Self {
        debug_assert!(vars.windows(2).all(|w| w[0] < w[1]));
        let len = dims.iter().product();
        Self {
            vars,
            dims,
            table: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn stride_of(&self, var: usize) -> Option<usize> {
        let pos = self.vars.iter().position(|&v| v == var)?;
        Some(self.dims[pos + 1..].iter().product())
    }

    /// Strides into `other` for each of this factor's variables (0 when the
    /// variable does not occur in `other`).
    fn strides_into(&self, other: &Factor) -> Vec<usize> {
        self.vars
            .iter()
            .map(|&v| other.stride_of(v).unwrap_or(0))
            .collect()
    }

    /// Adds `other` (whose variables are a subset of this factor's) into this
    /// factor, broadcasting along the missing axes.
    pub fn add_assign_broadcast(&mut self, other: &Factor) {
        debug_assert!(other.vars.iter().all(|v| self.vars.contains(v)));
        let strides = self.strides_into(other);
        let table = &mut self.table;
        for_each_mapped(&self.dims, &strides, |lin, o| {
            table[lin] += other.table[o];
        });
    }

    /// logsumexp-marginalizes onto `keep` (a subset of this factor's vars,
    /// sorted ascending).
    pub fn marginalize_onto(&self, keep: &[usize]) -> Factor {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let out_dims: Vec<usize> = keep
            .iter()
            .map(|&v| {
                let pos = self.vars.iter().position(|&x| x == v).expect("var present");
                self.dims[pos]
            })
            .collect();
        let mut out = Factor::zeros(keep.to_vec(), out_dims);
        let strides = self.strides_into(&out);
        let mut maxv = vec![f64::NEG_INFINITY; out.len()];
        let table = &self.table;
        for_each_mapped(&self.dims, &strides, |lin, o| {
            if table[lin] > maxv[o] {
                maxv[o] = table[lin];
            }
        });
        let mut sums = vec![0.0; out.len()];
        for_each_mapped(&self.dims, &strides, |lin, o| {
            if maxv[o] > f64::NEG_INFINITY {
                sums[o] += (table[lin] - maxv[o]).exp();
            }
        });
        for (o, cell) in out.table.iter_mut().enumerate() {
            *cell = if maxv[o] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                maxv[o] + sums[o].ln()
            };
        }
        out
    }

    /// Fixes `var` to `value`, removing the axis.
    pub fn condition(&self, var: usize, value: usize) -> Factor {
        let pos = self.vars.iter().position(|&v| v == var).expect("var present");
        let keep_vars: Vec<usize> = self
            .vars
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, &v)| v)
            .collect();
        let keep_dims: Vec<usize> = self
            .dims
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, &d)| d)
            .collect();
        let mut out = Factor::zeros(keep_vars, keep_dims);
        let var_stride: usize = self.dims[pos + 1..].iter().product();
        let out_table = &mut out.table;
        let mut o = 0;
        let block = var_stride;
        let outer = self.table.len() / (block * self.dims[pos]);
        for i in 0..outer {
            let base = i * block * self.dims[pos] + value * block;
            out_table[o..o + block].copy_from_slice(&self.table[base..base + block]);
            o += block;
        }
        out
    }

    /// The log-value at a full assignment given as values for each of this
    /// factor's variables in order.
    pub fn at(&self, values: &[usize]) -> f64 {
        let mut idx = 0;
        for (i, &v) in values.iter().enumerate() {
            idx = idx * self.dims[i] + v;
        }
        self.table[idx]
    }

    pub fn logsumexp_all(&self) -> f64 {
        logsumexp(&self.table)
    }

    /// Decodes a linear table index into per-variable values.
    pub fn decode(&self, mut lin: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for i in (0..self.dims.len()).rev() {
            out[i] = lin % self.dims[i];
            lin /= self.dims[i];
        }
        out
    }
}

/// Iterates the mixed-radix index space of `dims`, calling `f(linear, mapped)`
/// where `mapped` advances by `strides[i]` whenever digit `i` increments.
pub fn for_each_mapped(dims: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = dims.iter().product();
    if total == 0 {
        return;
    }
    let mut digits = vec![0usize; dims.len()];
    let mut mapped = 0usize;
    for lin in 0..total {
        f(lin, mapped);
        for i in (0..dims.len()).rev() {
            digits[i] += 1;
            mapped += strides[i];
            if digits[i] < dims[i] {
                break;
            }
            mapped -= dims[i] * strides[i];
            digits[i] = 0;
        }
    }
}
