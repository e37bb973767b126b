//! Line-oriented text checkpoints.
//!
//! ```text
//! RSCNN-CKPT v1
//! layer0.raise.weight 2 3 32
//! 0.12 -0.5 ...
//! ```
//!
//! Batch-norm running statistics use the reserved names
//! `bn:{layer}:running_mean` and `bn:{layer}:running_var`; optimizer state,
//! when present, lives under `adam:*` and the epoch counter under
//! `meta:epoch`.

use std::fmt::Write as _;
use std::path::Path;

use super::optim::Adam;
use crate::geometry::io::write_atomic;
use crate::tensor::{ParamStore, Real};
use crate::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "RSCNN-CKPT v1";

struct Entry<T> {
    name: String,
    shape: Vec<usize>,
    values: Vec<T>,
}

fn push_entry<T: Real>(out: &mut String, name: &str, shape: &[usize], values: &[T]) {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "{name} {} {}", shape.len(), dims.join(" "));
    let vals: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
}

/// Serialises parameters, running statistics and, if given, the optimizer
/// and the next epoch to run.
pub fn to_string<T: Real>(store: &ParamStore<T>, opt: Option<(&Adam<T>, usize)>) -> String {
    let mut out = format!("{CHECKPOINT_HEADER}\n");
    for p in store.params() {
        push_entry(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for bn in store.bn_states() {
        let c = bn.channels();
        push_entry(&mut out, &format!("bn:{}:running_mean", bn.name), &[c], &bn.running_mean);
        push_entry(&mut out, &format!("bn:{}:running_var", bn.name), &[c], &bn.running_var);
    }
    if let Some((adam, epoch)) = opt {
        for (p, (m, v)) in store.params().iter().zip(adam.m.iter().zip(&adam.v)) {
            push_entry(&mut out, &format!("adam:m:{}", p.name), p.value.shape(), m);
            push_entry(&mut out, &format!("adam:v:{}", p.name), p.value.shape(), v);
        }
        push_entry(&mut out, "adam:step", &[1], &[T::lit(adam.step as f64)]);
        push_entry(&mut out, "meta:epoch", &[1], &[T::lit(epoch as f64)]);
    }
    out
}

fn parse_entries<T: Real>(text: &str) -> Result<Vec<Entry<T>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(Error::Invalid(format!("checkpoint: missing `{CHECKPOINT_HEADER}` header"))),
    }
    let mut entries = Vec::new();
    while let Some((n, head)) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let bad = |line: usize, m: &str| Error::Invalid(format!("checkpoint line {}: {m}", line + 1));
        let mut parts = head.split_whitespace();
        let name = parts.next().ok_or_else(|| bad(n, "missing name"))?.to_string();
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n, "missing dimension count"))?;
        let shape: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad(n, "bad dimension")))
            .collect::<Result<_>>()?;
        if shape.len() != ndim {
            return Err(bad(n, &format!("`{name}` declares {ndim} dimensions but lists {}", shape.len())));
        }
        let (vn, vline) = lines.next().ok_or_else(|| bad(n, &format!("`{name}` has no value line")))?;
        let values: Vec<T> = vline
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(vn, &format!("bad value `{s}`"))))
            .collect::<Result<_>>()?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(bad(vn, &format!("`{name}` has {} values, shape needs {expected}", values.len())));
        }
        entries.push(Entry { name, shape, values });
    }
    Ok(entries)
}

/// Loads a checkpoint into `store`, which must have exactly the same
/// parameters. Returns the optimizer state and epoch when present.
pub fn from_str<T: Real>(text: &str, store: &mut ParamStore<T>) -> Result<Option<(Adam<T>, usize)>> {
    let entries = parse_entries::<T>(text)?;
    let mut seen = vec![false; store.len()];
    let mut bn_seen = vec![[false; 2]; store.bn_states().len()];
    let mut adam = Adam::new(store, 0.0);
    let mut has_adam = false;
    let mut step = None;
    let mut epoch = None;
    for e in entries {
        let mismatch = |want: &[usize]| Error::Invalid(format!("checkpoint `{}` has shape {:?}, expected {want:?}", e.name, e.shape));
        if let Some(rest) = e.name.strip_prefix("bn:") {
            let (layer, stat) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::Invalid(format!("malformed batch-norm entry `{}`", e.name)))?;
            let i = store
                .bn_states()
                .iter()
                .position(|b| b.name == layer)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has unknown batch-norm `{layer}`")))?;
            let st = &mut store.bn_states_mut()[i];
            if e.shape != [st.channels()] {
                return Err(mismatch(&[st.channels()]));
            }
            match stat {
                "running_mean" => {
                    st.running_mean = e.values;
                    bn_seen[i][0] = true;
                }
                "running_var" => {
                    st.running_var = e.values;
                    bn_seen[i][1] = true;
                }
                _ => return Err(Error::Invalid(format!("unknown batch-norm statistic `{stat}`"))),
            }
        } else if let Some(rest) = e.name.strip_prefix("adam:") {
            has_adam = true;
            if rest == "step" {
                step = Some(e.values[0].as_f64() as u64);
                continue;
            }
            let (which, pname) = rest
                .split_once(':')
                .ok_or_else(|| Error::Invalid(format!("malformed optimizer entry `{}`", e.name)))?;
            let id = store
                .find(pname)
                .ok_or_else(|| Error::Invalid(format!("optimizer state for unknown parameter `{pname}`")))?;
            if e.shape != store.get(id).value.shape() {
                return Err(mismatch(store.get(id).value.shape()));
            }
            match which {
                "m" => adam.m[id_index(store, id)] = e.values,
                "v" => adam.v[id_index(store, id)] = e.values,
                _ => return Err(Error::Invalid(format!("unknown optimizer entry `{}`", e.name))),
            }
        } else if e.name == "meta:epoch" {
            epoch = Some(e.values[0].as_f64() as usize);
        } else {
            let id = store
                .find(&e.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint has unknown parameter `{}`", e.name)))?;
            let p = store.get_mut(id);
            if e.shape != p.value.shape() {
                return Err(mismatch(p.value.shape()));
            }
            p.value.data_mut().copy_from_slice(&e.values);
            seen[id_index(store, id)] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!("checkpoint lacks parameter `{}`", store.params()[i].name)));
    }
    if let Some(i) = bn_seen.iter().position(|s| !s[0] || !s[1]) {
        return Err(Error::Invalid(format!("checkpoint lacks running statistics of `{}`", store.bn_states()[i].name)));
    }
    match (has_adam, step, epoch) {
        (false, None, None) => Ok(None),
        (true, Some(s), Some(e)) => {
            adam.step = s;
            Ok(Some((adam, e)))
        }
        _ => Err(Error::Invalid("checkpoint has incomplete optimizer state".into())),
    }
}

fn id_index<T: Real>(store: &ParamStore<T>, id: crate::tensor::ParamId) -> usize {
    store.ids().position(|i| i == id).expect("id from this store")
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, opt: Option<(&Adam<T>, usize)>) -> Result<()> {
    write_atomic(path, to_string(store, opt).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<Option<(Adam<T>, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, store).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

impl super::Trainer {
    /// Full training state, enough for [`Trainer::resume`] to continue
    /// bit-identically.
    ///
    /// [`Trainer::resume`]: super::Trainer::resume
    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, &self.store, Some((&self.opt, self.epoch)))
    }

    /// Rebuilds the network from `config` and restores parameters,
    /// statistics, optimizer state and epoch from a checkpoint written by
    /// [`Trainer::save`](super::Trainer::save).
    pub fn resume(config: crate::networks::NetworkConfig, path: &Path) -> Result<Self> {
        let mut store = ParamStore::new();
        let network = crate::networks::Network::build(config, &mut store)?;
        let (opt, epoch) = load(path, &mut store)?
            .ok_or_else(|| Error::Invalid(format!("{}: checkpoint has no optimizer state to resume from", path.display())))?;
        Ok(Self {
            network,
            store,
            opt,
            epoch,
        })
    }
}
