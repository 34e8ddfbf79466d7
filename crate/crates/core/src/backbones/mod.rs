//! Segmentation backbones: a convolutional encoder-decoder and a windowed
//! attention (shifted-window transformer) encoder-decoder behind one
//! interface, plus checkpoint persistence.

pub mod cnn;
pub mod vit;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use ndarray::{Array4, ArrayD, ArrayView4};
use ndarray_npy::{NpzReader, NpzWriter};

use crate::error::{Error, Result};
use crate::nn::param::{Param, Parameterized};

pub use cnn::{CnnConfig, UNet, UNetCache};
pub use vit::{AttentionConfig, VitCache, VitNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Cnn,
    Vit,
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetKind::Cnn => write!(f, "cnn"),
            NetKind::Vit => write!(f, "vit"),
        }
    }
}

/// Either backbone behind one train/eval/backward interface.
///
/// Inputs are `[B, 1, H, W]` images; outputs are `[B, K, H, W]` logits.
#[derive(Debug, Clone)]
pub enum Net {
    Cnn(UNet),
    Vit(VitNet),
}

pub enum NetCache {
    Cnn(UNetCache),
    Vit(VitCache),
}

impl Net {
    pub fn kind(&self) -> NetKind {
        match self {
            Net::Cnn(_) => NetKind::Cnn,
            Net::Vit(_) => NetKind::Vit,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Net::Cnn(n) => n.num_classes,
            Net::Vit(n) => n.num_classes,
        }
    }

    pub fn forward_train(&mut self, x: &ArrayView4<'_, f64>) -> Result<(Array4<f64>, NetCache)> {
        match self {
            Net::Cnn(n) => {
                let (y, c) = n.forward_train(x)?;
                Ok((y, NetCache::Cnn(c)))
            }
            Net::Vit(n) => {
                let (y, c) = n.forward_train(x)?;
                Ok((y, NetCache::Vit(c)))
            }
        }
    }

    pub fn forward_eval(&self, x: &ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        match self {
            Net::Cnn(n) => n.forward_eval(x),
            Net::Vit(n) => n.forward_eval(x),
        }
    }

    pub fn backward(&mut self, cache: &NetCache, dlogits: &ArrayView4<'_, f64>) -> Result<()> {
        match (self, cache) {
            (Net::Cnn(n), NetCache::Cnn(c)) => {
                n.backward(c, dlogits);
                Ok(())
            }
            (Net::Vit(n), NetCache::Vit(c)) => {
                n.backward(c, dlogits);
                Ok(())
            }
            _ => Err(Error::Structure(
                "forward cache does not belong to this network".into(),
            )),
        }
    }
}

impl Parameterized for Net {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Net::Cnn(n) => n.visit(prefix, f),
            Net::Vit(n) => n.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Net::Cnn(n) => n.visit_mut(prefix, f),
            Net::Vit(n) => n.visit_mut(prefix, f),
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        match self {
            Net::Cnn(n) => n.visit_buffers(prefix, f),
            Net::Vit(n) => n.visit_buffers(prefix, f),
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        match self {
            Net::Cnn(n) => n.visit_buffers_mut(prefix, f),
            Net::Vit(n) => n.visit_buffers_mut(prefix, f),
        }
    }
}

/// Write all parameters and buffers of `net` into one `.npz` archive of
/// canonical name -> array entries.
pub fn save_params<M: Parameterized>(net: &M, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzWriter::new(file);
    let mut failed: Option<String> = None;
    net.visit("", &mut |name, p| {
        if failed.is_none() && npz.add_array(name, &p.value).is_err() {
            failed = Some(name.to_string());
        }
    });
    net.visit_buffers("", &mut |name, b| {
        if failed.is_none() && npz.add_array(name, b).is_err() {
            failed = Some(name.to_string());
        }
    });
    if let Some(name) = failed {
        return Err(Error::Structure(format!(
            "could not serialize parameter {name}"
        )));
    }
    npz.finish().map_err(|e| Error::Structure(format!("could not finish archive: {e}")))?;
    Ok(())
}

/// Load parameters and buffers saved by [`save_params`] into `net`.
///
/// The archive must match the network exactly; missing entries, unknown
/// entries and shape mismatches are structure errors naming the parameter.
pub fn load_params<M: Parameterized>(net: &mut M, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz =
        NpzReader::new(file).map_err(|e| Error::Structure(format!("unreadable archive: {e}")))?;
    let mut stored: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let names = npz
        .names()
        .map_err(|e| Error::Structure(format!("unreadable archive index: {e}")))?;
    for name in names {
        let arr: ArrayD<f64> = npz
            .by_name(&name)
            .map_err(|e| Error::Structure(format!("unreadable entry {name}: {e}")))?;
        stored.insert(name.trim_end_matches(".npy").to_string(), arr);
    }

    let mut err: Option<Error> = None;
    net.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(arr) if arr.shape() == p.value.shape() => p.value = arr,
            Some(arr) => {
                err = Some(Error::Structure(format!(
                    "parameter {name}: archive shape {:?} does not match model shape {:?}",
                    arr.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Structure(format!("archive is missing parameter {name}"))),
        }
    });
    net.visit_buffers_mut("", &mut |name, b| {
        if err.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(arr) if arr.shape() == b.shape() => *b = arr,
            Some(arr) => {
                err = Some(Error::Structure(format!(
                    "buffer {name}: archive shape {:?} does not match model shape {:?}",
                    arr.shape(),
                    b.shape()
                )))
            }
            None => err = Some(Error::Structure(format!("archive is missing buffer {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Structure(format!(
            "archive contains unknown parameter {extra}"
        )));
    }
    Ok(())
}
