use std::collections::HashMap;

use super::{Gradients, Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(pub(crate) usize);

/// Role of a parameter, used by initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
    pub fan_in: usize,
    /// Set when a backward pass delivered a gradient since the last zeroing.
    pub(crate) touched: bool,
}

impl<T> Parameter<T> {
    pub fn has_grad(&self) -> bool {
        self.touched
    }
}

/// Running statistics of one batch-norm layer; scale and shift are ordinary
/// parameters in the same store.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub name: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight given to the newest batch when updating running statistics.
    pub momentum: T,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl<T: Real> BatchNormState<T> {
    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch statistics observed by a training-mode forward pass, applied to
/// the running state once the step completes.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub bn: BnId,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

/// Owner of every learnable tensor in a network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    bns: Vec<BatchNormState<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            bns: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a zero-initialised parameter.
    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, fan_in: usize) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        let value = match kind {
            ParamKind::BnScale => Tensor::full(shape, T::one()),
            _ => Tensor::zeros(shape),
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: vec![T::zero(); value.numel()],
            value,
            kind,
            fan_in,
            touched: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a batch-norm layer over `channels` features. Scale starts
    /// at one, shift at zero, running mean 0 and variance 1.
    pub fn add_batchnorm(&mut self, name: &str, channels: usize) -> Result<BnId> {
        let scale = self.add(&format!("{name}.scale"), &[1, channels], ParamKind::BnScale, 0)?;
        let shift = self.add(&format!("{name}.shift"), &[1, channels], ParamKind::BnShift, 0)?;
        let id = BnId(self.bns.len());
        self.bns.push(BatchNormState {
            name: name.to_string(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.9),
            scale,
            shift,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn bn(&self, id: BnId) -> &BatchNormState<T> {
        &self.bns[id.0]
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bns
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bns
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
            p.touched = false;
        }
    }

    /// Adds the parameter gradients of one backward pass (`+=` semantics).
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            for (acc, &v) in p.grad.iter_mut().zip(g) {
                *acc += v;
            }
            p.touched = true;
        }
    }

    /// Folds observed batch statistics into the running state, in order.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let st = &mut self.bns[u.bn.0];
            let m = st.momentum;
            let keep = T::one() - m;
            for c in 0..st.running_mean.len() {
                st.running_mean[c] = keep * st.running_mean[c] + m * u.mean[c];
                st.running_var[c] = (keep * st.running_var[c] + m * u.var[c]).max(T::zero());
            }
        }
    }

    pub fn set_bn_momentum(&mut self, momentum: T) {
        for st in &mut self.bns {
            st.momentum = momentum;
        }
    }

    /// Copy of the store at another precision. Ids stay valid.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|g| U::lit(g.as_f64())).collect(),
                    kind: p.kind,
                    fan_in: p.fan_in,
                    touched: p.touched,
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNormState {
                    name: b.name.clone(),
                    running_mean: b.running_mean.iter().map(|x| U::lit(x.as_f64())).collect(),
                    running_var: b.running_var.iter().map(|x| U::lit(x.as_f64())).collect(),
                    momentum: U::lit(b.momentum.as_f64()),
                    scale: b.scale,
                    shift: b.shift,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", &[2, 2], ParamKind::Weight, 2).unwrap();
        assert!(matches!(
            s.add("w", &[1], ParamKind::Bias, 0),
            Err(TensorError::DuplicateName(_))
        ));
    }

    #[test]
    fn batchnorm_defaults() {
        let mut s = ParamStore::<f32>::new();
        let bn = s.add_batchnorm("bn", 3).unwrap();
        let st = s.bn(bn);
        assert_eq!(s.get(st.scale).value.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.get(st.shift).value.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(st.running_var, vec![1.0; 3]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let bn = s.add_batchnorm("bn", 1).unwrap();
        s.set_bn_momentum(0.5);
        s.apply_bn_updates(&[BnUpdate {
            bn,
            mean: vec![4.0],
            var: vec![3.0],
        }]);
        assert_eq!(s.bn(bn).running_mean, vec![2.0]);
        assert_eq!(s.bn(bn).running_var, vec![2.0]);
    }
}
