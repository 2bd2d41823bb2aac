use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{NumericsError, Tensor};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Renders tensors in the text checkpoint layout: a `name rows cols` header
/// followed by one line of space-separated values per row. Values use the
/// shortest round-trip decimal form, so reading back is bit-exact.
pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut out = String::new();
    for (name, t) in entries {
        let _ = writeln!(out, "{} {} {}", name, t.rows(), t.cols());
        for r in 0..t.rows() {
            let mut first = true;
            for v in t.row(r) {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn decode_tensors(text: &str) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: &str| NumericsError::Checkpoint { line: line + 1, message: msg.to_string() };
    while let Some((ln, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(ln, "expected `name rows cols` header"));
        }
        let rows: usize = parts[1].parse().map_err(|_| bad(ln, "row count is not an integer"))?;
        let cols: usize = parts[2].parse().map_err(|_| bad(ln, "column count is not an integer"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rln, row) = lines.next().ok_or_else(|| bad(ln, "truncated tensor"))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| bad(rln, "malformed float"))?);
            }
            if data.len() - before != cols {
                return Err(bad(rln, "row length differs from header"));
            }
        }
        out.push((parts[0].to_string(), Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, store: &ParamStore) -> Result<(), NumericsError> {
    fs::write(path, encode_tensors(store.iter())).map_err(|e| NumericsError::Io(path.display().to_string(), e))
}

pub fn read_tensor_file(path: &Path) -> Result<ParamStore, NumericsError> {
    let text = fs::read_to_string(path).map_err(|e| NumericsError::Io(path.display().to_string(), e))?;
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(&text)? {
        store.insert(&name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_text_round_trip_is_bit_exact(
            rows in 0usize..4,
            cols in 1usize..5,
            seed in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 20),
        ) {
            let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % seed.len()]).collect();
            let t = Tensor::from_vec(rows, cols, data).unwrap();
            let text = encode_tensors([("w.0", &t)]);
            let back = decode_tensors(&text).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, "w.0");
            for (a, b) in back[0].1.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let err = decode_tensors("w 2 2\n1 2\n").unwrap_err();
        assert!(matches!(err, NumericsError::Checkpoint { .. }));
    }
}
