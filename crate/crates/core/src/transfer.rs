//! Re-laying out a trained population for a different slice count.
//!
//! Only the critics' first layer depends on the slice count, and the
//! observation is ordered slice block first, so surgery moves, inserts or
//! deletes whole input columns and copies everything else.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::maddpg::{actor_spec, critic_spec, AgentBundle, Maddpg};
use crate::env::{ObsLayout, SlicePlacement, SLICE_BLOCK};
use crate::nn::Mlp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransferError {
    #[error("expand needs more slices than the population has ({have} -> {want})")]
    ShrinkNotSupported { have: usize, want: usize },
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("no surviving slices")]
    EmptySurvivorSet,
    #[error("slice {0} is not in the population")]
    UnknownSlice(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewAgentInit {
    #[default]
    Average,
    Fresh,
}

/// Where each old critic input column lands in the new layout.
fn column_map(old: &ObsLayout, new: &ObsLayout, kept: &[usize]) -> Vec<Option<usize>> {
    let mut map = vec![None; old.global_width() + old.action_width()];
    for (new_i, &old_i) in kept.iter().enumerate() {
        for k in 0..SLICE_BLOCK {
            map[old_i * SLICE_BLOCK + k] = Some(new_i * SLICE_BLOCK + k);
        }
        for k in 0..2 {
            map[old.global_width() + 2 * old_i + k] = Some(new.global_width() + 2 * new_i + k);
        }
    }
    let shared = old.nodes + old.links + 1;
    for k in 0..shared {
        map[old.node_offset() + k] = Some(new.node_offset() + k);
    }
    map
}

/// Rebuilds `net`'s first layer for `new_in` inputs; unmapped new columns are zero.
fn remap_inputs(net: &Mlp, map: &[Option<usize>], new_in: usize) -> Mlp {
    let old_in = net.spec.input_width();
    assert_eq!(map.len(), old_in);
    let mut spec = net.spec.clone();
    spec.sizes[0] = new_in;
    let mut out = Mlp::zeros(spec);
    let hidden = net.spec.sizes[1];
    for row in 0..hidden {
        for (c, dst) in map.iter().enumerate() {
            if let Some(d) = dst {
                out.params[row * new_in + d] = net.params[row * old_in + c];
            }
        }
    }
    let tail_old = &net.params[net.spec.bias_offset(0)..];
    out.params[out.spec.bias_offset(0)..].copy_from_slice(tail_old);
    out
}

fn average(nets: &[&Mlp]) -> Mlp {
    let mut out = Mlp::zeros(nets[0].spec.clone());
    for n in nets {
        assert_eq!(n.spec, out.spec);
        for (o, p) in out.params.iter_mut().zip(&n.params) {
            *o += p;
        }
    }
    let k = nets.len() as f64;
    out.params.iter_mut().for_each(|p| *p /= k);
    out
}

fn check(pop: &Maddpg) -> Result<(), TransferError> {
    pop.check_widths().map_err(|e| TransferError::WidthMismatch(e.to_string()))
}

/// Grows an `N`-agent population to `placements.len()` agents. Existing
/// agents keep their actors; their critics gain zero columns for the new
/// slices. New agents start from the average of the existing ones.
pub fn expand<R: Rng + ?Sized>(
    pop: &Maddpg,
    placements: Vec<SlicePlacement>,
    init: NewAgentInit,
    rng: &mut R,
) -> Result<Maddpg, TransferError> {
    check(pop)?;
    let (n, m) = (pop.slices(), placements.len());
    if m <= n {
        return Err(TransferError::ShrinkNotSupported { have: n, want: m });
    }
    if placements[..n] != pop.placements[..] {
        return Err(TransferError::WidthMismatch("existing slices must keep their placement".into()));
    }
    let old = pop.layout;
    let new = ObsLayout { slices: m, ..old };
    let kept: Vec<usize> = (0..n).collect();
    let map = column_map(&old, &new, &kept);
    let new_in = new.global_width() + new.action_width();
    let mut agents: Vec<AgentBundle> = pop
        .agents
        .iter()
        .map(|a| {
            let critic = remap_inputs(&a.critic, &map, new_in);
            let mut b = AgentBundle::new(a.slice_id, a.actor.clone(), critic, &pop.cfg);
            b.sigma = a.sigma;
            b
        })
        .collect();
    for s in n..m {
        let (actor, critic) = match init {
            NewAgentInit::Average => {
                let actors: Vec<&Mlp> = agents[..n].iter().map(|a| &a.actor).collect();
                let critics: Vec<&Mlp> = agents[..n].iter().map(|a| &a.critic).collect();
                (average(&actors), average(&critics))
            }
            NewAgentInit::Fresh => (
                Mlp::init(actor_spec(&pop.cfg.actor_hidden), rng, 3e-3),
                Mlp::init(critic_spec(&new, &pop.cfg.critic_hidden), rng, 3e-3),
            ),
        };
        let mut b = AgentBundle::new(s, actor, critic, &pop.cfg);
        b.sigma = pop.agents[0].sigma;
        agents.push(b);
    }
    Ok(Maddpg { cfg: pop.cfg.clone(), layout: new, placements, agents })
}

/// Keeps only `survivors` (in the given order), deleting the critic columns
/// of every removed slice.
pub fn contract(pop: &Maddpg, survivors: &[usize]) -> Result<Maddpg, TransferError> {
    check(pop)?;
    if survivors.is_empty() {
        return Err(TransferError::EmptySurvivorSet);
    }
    if let Some(&bad) = survivors.iter().find(|&&s| s >= pop.slices()) {
        return Err(TransferError::UnknownSlice(bad));
    }
    let old = pop.layout;
    let new = ObsLayout { slices: survivors.len(), ..old };
    let map = column_map(&old, &new, survivors);
    let new_in = new.global_width() + new.action_width();
    let agents = survivors
        .iter()
        .enumerate()
        .map(|(new_id, &old_id)| {
            let a = &pop.agents[old_id];
            let critic = remap_inputs(&a.critic, &map, new_in);
            let mut b = AgentBundle::new(new_id, a.actor.clone(), critic, &pop.cfg);
            b.sigma = a.sigma;
            b
        })
        .collect();
    let placements = survivors.iter().map(|&s| pop.placements[s]).collect();
    Ok(Maddpg { cfg: pop.cfg.clone(), layout: new, placements, agents })
}
