use std::collections::BTreeSet;

use rand::Rng;

use super::tensor::{Real, Tensor};

/// Position of a tensor inside a [`ParamStore`]: (partition index, tensor index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub partition: usize,
    pub tensor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    pub name: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Named, independently freezable parameter partitions.
///
/// Partitions are kept sorted by name so iteration order (and therefore
/// checkpoint layout and gradient layout) is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    partitions: Vec<Partition<T>>,
    trainable: BTreeSet<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            partitions: Vec::new(),
            trainable: BTreeSet::new(),
        }
    }

    /// Adds an empty partition; new partitions start trainable.
    pub fn add_partition(&mut self, name: &str) -> usize {
        assert!(
            self.partition_index(name).is_none(),
            "duplicate partition name {name:?}"
        );
        let pos = self
            .partitions
            .binary_search_by(|p| p.name.as_str().cmp(name))
            .unwrap_err();
        self.partitions.insert(
            pos,
            Partition {
                name: name.to_string(),
                tensors: Vec::new(),
            },
        );
        self.trainable.insert(name.to_string());
        pos
    }

    pub fn add_tensor(&mut self, partition: &str, name: &str, tensor: Tensor<T>) -> ParamRef {
        let p = self
            .partition_index(partition)
            .unwrap_or_else(|| panic!("unknown partition {partition:?}"));
        let part = &mut self.partitions[p];
        assert!(
            part.tensors.iter().all(|(n, _)| n != name),
            "duplicate tensor {name:?} in partition {partition:?}"
        );
        part.tensors.push((name.to_string(), tensor));
        ParamRef {
            partition: p,
            tensor: part.tensors.len() - 1,
        }
    }

    pub fn remove_partition(&mut self, name: &str) -> Option<Partition<T>> {
        let idx = self.partition_index(name)?;
        self.trainable.remove(name);
        Some(self.partitions.remove(idx))
    }

    /// Inserts a whole partition, replacing any existing partition with the same name.
    pub fn insert_partition(&mut self, partition: Partition<T>) {
        let name = partition.name.clone();
        self.remove_partition(&name);
        self.add_partition(&name);
        let idx = self.partition_index(&name).unwrap();
        self.partitions[idx] = partition;
    }

    pub fn partition_index(&self, name: &str) -> Option<usize> {
        self.partitions
            .binary_search_by(|p| p.name.as_str().cmp(name))
            .ok()
    }

    pub fn has_partition(&self, name: &str) -> bool {
        self.partition_index(name).is_some()
    }

    pub fn partitions(&self) -> &[Partition<T>] {
        &self.partitions
    }

    pub fn partition(&self, name: &str) -> Option<&Partition<T>> {
        self.partition_index(name).map(|i| &self.partitions[i])
    }

    pub fn partition_names(&self) -> Vec<String> {
        self.partitions.iter().map(|p| p.name.clone()).collect()
    }

    pub fn lookup(&self, partition: &str, tensor: &str) -> Option<ParamRef> {
        let p = self.partition_index(partition)?;
        let t = self.partitions[p]
            .tensors
            .iter()
            .position(|(n, _)| n == tensor)?;
        Some(ParamRef {
            partition: p,
            tensor: t,
        })
    }

    pub fn get(&self, r: ParamRef) -> &Tensor<T> {
        &self.partitions[r.partition].tensors[r.tensor].1
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<T> {
        &mut self.partitions[r.partition].tensors[r.tensor].1
    }

    pub fn tensor(&self, partition: &str, tensor: &str) -> Option<&Tensor<T>> {
        self.lookup(partition, tensor).map(|r| self.get(r))
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn is_trainable(&self, partition: usize) -> bool {
        self.trainable.contains(&self.partitions[partition].name)
    }

    /// Replaces the trainable set. Unknown names are a contract violation.
    pub fn set_trainable<I, S>(&mut self, names: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.as_ref();
            assert!(self.has_partition(n), "unknown partition {n:?} in trainable set");
            set.insert(n.to_string());
        }
        self.trainable = set;
    }

    pub fn set_all_trainable(&mut self) {
        self.trainable = self.partitions.iter().map(|p| p.name.clone()).collect();
    }

    pub fn param_count(&self) -> usize {
        self.partitions
            .iter()
            .flat_map(|p| p.tensors.iter())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Every `(partition, tensor)` reference in canonical order.
    pub fn refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (pi, p) in self.partitions.iter().enumerate() {
            for ti in 0..p.tensors.len() {
                out.push(ParamRef {
                    partition: pi,
                    tensor: ti,
                });
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .partitions
                .iter()
                .map(|p| {
                    p.tensors
                        .iter()
                        .map(|(_, t)| Tensor::zeros(t.shape()))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            partitions: self
                .partitions
                .iter()
                .map(|p| Partition {
                    name: p.name.clone(),
                    tensors: p
                        .tensors
                        .iter()
                        .map(|(n, t)| (n.clone(), t.cast()))
                        .collect(),
                })
                .collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Gradients laid out exactly like the [`ParamStore`] they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    tensors: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, r: ParamRef) -> &Tensor<T> {
        &self.tensors[r.partition][r.tensor]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<T> {
        &mut self.tensors[r.partition][r.tensor]
    }

    pub fn partition(&self, index: usize) -> &[Tensor<T>] {
        &self.tensors[index]
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.tensors {
            for t in p {
                t.scale_assign(s);
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors
            .iter()
            .flatten()
            .map(|t| t.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Zeroes every partition that is not trainable in `store`.
    pub fn mask_to_trainable(&mut self, store: &ParamStore<T>) {
        for (pi, p) in self.tensors.iter_mut().enumerate() {
            if !store.is_trainable(pi) {
                for t in p {
                    t.scale_assign(T::zero());
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|t| t.is_finite())
    }
}

/// Glorot-uniform dense weight of shape `[fan_in, fan_out]`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_partition("p");
        s.add_partition("q");
        s.add_tensor("p", "a", Tensor::row(&[3.0, 4.0]));
        s.add_tensor("q", "b", Tensor::row(&[1.0]));
        s
    }

    #[test]
    fn lookup_and_partitions() {
        let s = store();
        assert_eq!(s.partition_names(), vec!["p".to_string(), "q".to_string()]);
        let r = s.lookup("q", "b").unwrap();
        assert_eq!(s.get(r).data(), &[1.0]);
        assert!(s.lookup("q", "zz").is_none());
        assert_eq!(s.param_count(), 3);
        assert_eq!(s.trainable().len(), 2);
    }

    #[test]
    #[should_panic(expected = "unknown partition")]
    fn unknown_trainable_name_panics() {
        store().set_trainable(["nope"]);
    }

    #[test]
    fn clipping_and_masking() {
        let mut s = store();
        let mut g = s.zeros_like();
        g.get_mut(s.lookup("p", "a").unwrap()).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(g.global_norm(), 5.0);
        let pre = g.clip_global_norm(1.0);
        assert_eq!(pre, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        s.set_trainable(["q"]);
        g.mask_to_trainable(&s);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn remove_and_reinsert_partition() {
        let mut s = store();
        s.set_all_trainable();
        let p = s.remove_partition("p").unwrap();
        assert!(!s.has_partition("p"));
        assert!(!s.trainable().contains("p"));
        s.insert_partition(p);
        assert_eq!(s.tensor("p", "a").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn glorot_within_limit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = glorot_uniform(10, 14, &mut rng);
        let lim = 0.5;
        assert_eq!(w.shape(), &[10, 14]);
        assert!(w.data().iter().all(|v| v.abs() < lim));
        assert!(w.data().iter().any(|v| v.abs() > lim / 2.0));
    }
}
