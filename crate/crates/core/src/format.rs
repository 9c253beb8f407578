//! Binary persistence.
//!
//! `DTB1` tensor: magic `DTB1`, u8 dtype (1 = f64), u8 ndim, ndim x u64 LE
//! dims, row-major f64 LE payload.
//!
//! `SDCK` container: magic `SDCK`, u32 LE entry count, then per entry a u32 LE
//! name length, the UTF-8 name and a DTB1 tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTB_MAGIC: &[u8; 4] = b"DTB1";
const CONTAINER_MAGIC: &[u8; 4] = b"SDCK";
const DTYPE_F64: u8 = 1;

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(DTB_MAGIC)?;
    out.write_all(&[DTYPE_F64, t.ndim() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated {}: {}", what, e)))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "DTB1 magic")?;
    if &magic != DTB_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head, "DTB1 header")?;
    if head[0] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype {}", head[0])));
    }
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut d = [0u8; 8];
        read_exact(r, &mut d, "DTB1 dims")?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    read_exact(r, &mut payload, "DTB1 payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut v = Vec::new();
    write_tensor(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes in {}",
            cur.len(),
            path.display()
        )));
    }
    Ok(t)
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate container entry `{}`", name)));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("container has no entry `{}`", name)))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Entry names starting with `prefix`, in insertion order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "container magic")?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format(format!("bad container magic {:?}", magic)));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, "entry count")?;
        let count = u32::from_le_bytes(word);
        let mut c = Container::new();
        for _ in 0..count {
            read_exact(&mut r, &mut word, "name length")?;
            let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
            read_exact(&mut r, &mut name, "entry name")?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("entry name: {}", e)))?;
            let t = read_tensor(&mut r)?;
            c.insert(name, t)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after container", r.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..6], b"DTB1\x01\x02");
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..30], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&mut &b"XXXX"[..]), Err(Error::Format(_))));
        let b = tensor_to_bytes(&Tensor::zeros(&[3]));
        assert!(read_tensor(&mut &b[..b.len() - 1]).is_err());
        assert!(Container::from_bytes(b"SDCK\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        c.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(c.insert("a", Tensor::zeros(&[1])).is_err());
    }

    proptest! {
        #[test]
        fn container_reload_is_byte_identical(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            names in proptest::collection::btree_set("[a-z/._0-9]{1,12}", 1..5),
        ) {
            let mut c = Container::new();
            for (i, n) in names.iter().enumerate() {
                let k = (i % vals.len()) + 1;
                c.insert(n.clone(), Tensor::new(vec![k], vals[..k].to_vec()).unwrap()).unwrap();
            }
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
