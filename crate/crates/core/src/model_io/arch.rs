// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logical weight roles and their checkpoint tensor names.

use super::container::TensorStore;

/// A logical weight in a pre-layer-norm decoder block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    TokenEmbedding,
    PositionEmbedding,
    Ln1Gain(usize),
    Ln1Bias(usize),
    /// Fused query/key/value projection, `d_model × 3·d_model`.
    QkvWeight(usize),
    QkvBias(usize),
    AttnOutWeight(usize),
    AttnOutBias(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    MlpInWeight(usize),
    MlpInBias(usize),
    MlpOutWeight(usize),
    MlpOutBias(usize),
    FinalLnGain,
    FinalLnBias,
    /// Separate unembedding; GPT-2 ties it to the token embedding.
    Unembedding,
}

/// Versioned role → name table for GPT-2 layout checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureMap {
    pub version: u32,
    prefix: String,
}

impl Default for ArchitectureMap {
    fn default() -> Self {
        Self::gpt2()
    }
}

impl ArchitectureMap {
    pub const GPT2_VERSION: u32 = 1;

    pub fn gpt2() -> Self {
        Self {
            version: Self::GPT2_VERSION,
            prefix: String::new(),
        }
    }

    /// Some exports nest everything under `transformer.`; pick whichever
    /// prefix the store actually uses.
    pub fn detect(store: &TensorStore) -> Self {
        let prefix = if !store.contains("wte.weight") && store.contains("transformer.wte.weight") {
            "transformer."
        } else {
            ""
        };
        Self {
            version: Self::GPT2_VERSION,
            prefix: prefix.to_string(),
        }
    }

    pub fn name(&self, role: Role) -> String {
        let p = &self.prefix;
        match role {
            Role::TokenEmbedding => format!("{p}wte.weight"),
            Role::PositionEmbedding => format!("{p}wpe.weight"),
            Role::Ln1Gain(l) => format!("{p}h.{l}.ln_1.weight"),
            Role::Ln1Bias(l) => format!("{p}h.{l}.ln_1.bias"),
            Role::QkvWeight(l) => format!("{p}h.{l}.attn.c_attn.weight"),
            Role::QkvBias(l) => format!("{p}h.{l}.attn.c_attn.bias"),
            Role::AttnOutWeight(l) => format!("{p}h.{l}.attn.c_proj.weight"),
            Role::AttnOutBias(l) => format!("{p}h.{l}.attn.c_proj.bias"),
            Role::Ln2Gain(l) => format!("{p}h.{l}.ln_2.weight"),
            Role::Ln2Bias(l) => format!("{p}h.{l}.ln_2.bias"),
            Role::MlpInWeight(l) => format!("{p}h.{l}.mlp.c_fc.weight"),
            Role::MlpInBias(l) => format!("{p}h.{l}.mlp.c_fc.bias"),
            Role::MlpOutWeight(l) => format!("{p}h.{l}.mlp.c_proj.weight"),
            Role::MlpOutBias(l) => format!("{p}h.{l}.mlp.c_proj.bias"),
            Role::FinalLnGain => format!("{p}ln_f.weight"),
            Role::FinalLnBias => format!("{p}ln_f.bias"),
            Role::Unembedding => "lm_head.weight".to_string(),
        }
    }

    /// Every role a loadable checkpoint must provide (the unembedding is
    /// optional because it is usually tied).
    pub fn required_roles(n_layers: usize) -> Vec<Role> {
        let mut roles = vec![Role::TokenEmbedding, Role::PositionEmbedding];
        for l in 0..n_layers {
            roles.extend([
                Role::Ln1Gain(l),
                Role::Ln1Bias(l),
                Role::QkvWeight(l),
                Role::QkvBias(l),
                Role::AttnOutWeight(l),
                Role::AttnOutBias(l),
                Role::Ln2Gain(l),
                Role::Ln2Bias(l),
                Role::MlpInWeight(l),
                Role::MlpInBias(l),
                Role::MlpOutWeight(l),
                Role::MlpOutBias(l),
            ]);
        }
        roles.extend([Role::FinalLnGain, Role::FinalLnBias]);
        roles
    }

    /// Names from [`Self::required_roles`] that are absent from `store`.
    pub fn missing(&self, store: &TensorStore, n_layers: usize) -> Vec<String> {
        Self::required_roles(n_layers)
            .into_iter()
            .map(|r| self.name(r))
            .filter(|n| !store.contains(n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_names() {
        let map = ArchitectureMap::gpt2();
        assert_eq!(map.name(Role::QkvWeight(3)), "h.3.attn.c_attn.weight");
        assert_eq!(map.name(Role::FinalLnBias), "ln_f.bias");
        assert_eq!(ArchitectureMap::required_roles(12).len(), 2 + 12 * 12 + 2);
    }
}
