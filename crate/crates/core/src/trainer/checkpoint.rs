use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Container;
use crate::dit::{DitConfig, DitModel};
use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;
use crate::ppm::{format_kv, parse_kv};

use super::Role;

pub const CHECKPOINT_FORMAT: &str = "posegen-adapter";

/// Trained parameters of one role: adapters, patchifiers and the hand
/// projection. Frozen base weights are never stored; they are rebuilt
/// from the configuration's base seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub step: usize,
    pub config: DitConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &DitModel, role: Role, step: usize) -> Self {
        let store = model.store();
        let params = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = store.param(id);
                (p.name.clone(), p.value.clone())
            })
            .collect();
        Self {
            role,
            step,
            config: *model.config(),
            params,
        }
    }

    /// Copies the stored parameters into `model`, whose configuration must
    /// match exactly.
    pub fn apply_to(&self, model: &mut DitModel) -> Result<()> {
        if *model.config() != self.config {
            return Err(config_err!("checkpoint was trained with a different model configuration"));
        }
        let store = model.store_mut();
        let trainable = store.trainable_ids();
        if trainable.len() != self.params.len() {
            return Err(config_err!(
                "checkpoint holds {} tensors, model has {} trainable",
                self.params.len(),
                trainable.len()
            ));
        }
        for id in trainable {
            let name = store.param(id).name.clone();
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| config_err!("checkpoint lacks parameter {name}"))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn instantiate(&self) -> Result<DitModel> {
        let mut m = DitModel::new(self.config)?;
        self.apply_to(&mut m)?;
        Ok(m)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert_text("meta/format", CHECKPOINT_FORMAT);
        c.insert_text("meta/role", self.role.to_string());
        c.insert_text("meta/step", self.step.to_string());
        c.insert_text("meta/config", format_kv(self.config.to_pairs()));
        for (k, v) in &self.params {
            c.insert_tensor(format!("param/{k}"), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.text("meta/format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format("container is not an adapter checkpoint".into()));
        }
        let role = c.text("meta/role")?.parse()?;
        let step = c
            .text("meta/step")?
            .parse()
            .map_err(|_| Error::Format("bad meta/step".into()))?;
        let mut config = DitConfig::default();
        for (k, v) in parse_kv(c.text("meta/config")?)? {
            if !config.set(&k, &v)? {
                return Err(Error::Format(format!("unknown model key {k} in checkpoint")));
            }
        }
        config.validate()?;
        let params = c
            .names_with_prefix("param/")
            .map(|n| Ok((n["param/".len()..].to_string(), c.tensor(n)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Self { role, step, config, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
