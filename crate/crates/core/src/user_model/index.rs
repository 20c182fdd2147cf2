//! Brute-force top-m similar-user lookup over trained user embeddings.

use std::collections::HashMap;
use std::path::Path;

use super::encoder::UserEncoder;
use crate::corpus::{read_embedding_cache, write_embedding_cache, EmbeddingCache};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UserIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    lookup: HashMap<String, usize>,
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric("user embedding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

impl UserIndex {
    /// Index over already computed embeddings; rows are renormalized.
    pub fn from_embeddings(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut lookup = HashMap::new();
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::dim(format!(
                    "user `{id}` embedding has {} dims, expected {dim}",
                    v.len()
                )));
            }
            if lookup.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Integrity(format!("duplicate user `{id}` in index")));
            }
            ids.push(id);
            vectors.push(unit(v)?);
        }
        Ok(UserIndex {
            ids,
            vectors,
            lookup,
        })
    }

    /// Encodes every user's embedded history.
    pub fn build<'a>(
        encoder: &UserEncoder,
        users: impl IntoIterator<Item = (&'a str, &'a [Vec<f64>])>,
    ) -> Result<Self> {
        let entries = users
            .into_iter()
            .map(|(id, h)| Ok((id.to_string(), encoder.encode(h)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_embeddings(entries)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn embedding(&self, user_id: &str) -> Option<&[f64]> {
        self.lookup
            .get(user_id)
            .map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// The `m` users most similar to `user_id` by cosine, best first, ties
    /// by ascending id. The user itself is eligible. `m` above the number of
    /// indexed users returns them all.
    pub fn retrieve(&self, user_id: &str, m: usize) -> Result<Vec<(String, f64)>> {
        if m == 0 {
            return Err(Error::contract("m must be at least 1"));
        }
        let &q = self.lookup.get(user_id).ok_or_else(|| Error::Lookup {
            kind: "user",
            key: user_id.to_string(),
        })?;
        let query = &self.vectors[q];
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.iter().zip(query).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        scored.truncate(m);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    pub fn to_cache(&self) -> EmbeddingCache {
        let mut cache = EmbeddingCache::new(self.dim());
        for (id, v) in self.iter() {
            cache.push(id, v);
        }
        cache
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_embedding_cache(path, &self.to_cache())
    }

    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        let cache = read_embedding_cache(path, expected_dim)?;
        Self::from_embeddings(
            cache
                .entries
                .into_iter()
                .map(|(id, v)| (id, v.into_iter().map(f64::from).collect()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> UserIndex {
        UserIndex::from_embeddings(vec![
            ("b".into(), vec![1.0, 0.0]),
            ("a".into(), vec![2.0, 0.0]),
            ("c".into(), vec![0.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn ties_break_by_id() {
        let idx = index();
        let ids: Vec<String> = idx
            .retrieve("b", 3)
            .unwrap()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn self_first_for_m1() {
        assert_eq!(index().retrieve("c", 1).unwrap()[0].0, "c");
    }

    #[test]
    fn unknown_user_is_lookup_error() {
        assert!(matches!(
            index().retrieve("zz", 1),
            Err(Error::Lookup { .. })
        ));
        assert!(index().retrieve("a", 0).is_err());
    }

    #[test]
    fn persists_through_cache_format() {
        let idx = index();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users.bin");
        idx.save(&path).unwrap();
        let back = UserIndex::load(&path, Some(2)).unwrap();
        assert_eq!(
            back.retrieve("b", 3).unwrap(),
            idx.retrieve("b", 3).unwrap()
        );
    }
}
