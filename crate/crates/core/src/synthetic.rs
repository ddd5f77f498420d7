//! Synthetic interaction generator with planted group preferences.
//!
//! Users and items are assigned to groups round-robin (`id % groups`). Each
//! event picks a uniform user, then an item from the user's preferred group
//! with probability `1 - noise`, otherwise uniformly from the other groups.
//! At the event-count midpoint every user's preference shifts to the next
//! group, so models must track drift rather than memorize a static mapping.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{EventLog, IdMaps, InteractionEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOptions {
    pub groups: usize,
    pub users: usize,
    pub items: usize,
    pub events: usize,
    /// Probability that an event ignores the planted preference.
    pub noise: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions { groups: 2, users: 200, items: 200, events: 20_000, noise: 0.2 }
    }
}

impl SyntheticOptions {
    fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::config("synthetic.groups must be at least 1"));
        }
        if self.users == 0 || self.events == 0 {
            return Err(Error::config("synthetic.users and synthetic.events must be positive"));
        }
        if self.items < self.groups {
            return Err(Error::config(format!(
                "synthetic.items ({}) must be at least synthetic.groups ({})",
                self.items, self.groups
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !self.noise.is_finite() {
            return Err(Error::config(format!(
                "synthetic.noise must lie in [0, 1], got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Preferred item group of `user` for event position `k`.
    pub fn preferred_group(&self, user: usize, k: usize) -> usize {
        let base = user % self.groups;
        if k >= self.events / 2 {
            (base + 1) % self.groups
        } else {
            base
        }
    }
}

/// Deterministic event stream for `seed`. Timestamps are `1, 2, ...` so
/// every event is strictly ordered; raw ids are `u{n}` / `i{n}` and the id
/// maps cover the full configured ranges, including nodes that never
/// interact.
pub fn generate(opts: &SyntheticOptions, seed: u64) -> Result<EventLog> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(opts.events);
    for k in 0..opts.events {
        let user = rng.random_range(0..opts.users);
        let preferred = opts.preferred_group(user, k);
        let off_preference = opts.groups > 1 && rng.random::<f64>() < opts.noise;
        let item = if off_preference {
            // Uniform over items outside the preferred group.
            loop {
                let v = rng.random_range(0..opts.items);
                if v % opts.groups != preferred {
                    break v;
                }
            }
        } else {
            // Uniform over the preferred group's members.
            let count = (opts.items - preferred).div_ceil(opts.groups);
            preferred + opts.groups * rng.random_range(0..count)
        };
        events.push(InteractionEvent {
            user,
            item,
            timestamp: (k + 1) as f64,
            edge_features: vec![],
        });
    }
    let ids = IdMaps {
        users: (0..opts.users).map(|u| format!("u{u}")).collect(),
        items: (0..opts.items).map(|i| format!("i{i}")).collect(),
    };
    Ok(EventLog {
        events,
        num_users: opts.users,
        num_items: opts.items,
        d_e: 0,
        ids: Arc::new(ids),
    })
}

/// Write `log` in the standard input format, with a comment line recording
/// how it was produced.
pub fn write_csv<W: Write>(
    mut w: W,
    log: &EventLog,
    opts: &SyntheticOptions,
    seed: u64,
) -> Result<()> {
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            w,
            "# synthetic interactions: groups={} users={} items={} events={} noise={} seed={}",
            opts.groups, opts.users, opts.items, opts.events, opts.noise, seed
        )?;
        writeln!(w, "user_id,item_id,timestamp")?;
        for e in &log.events {
            writeln!(w, "{},{},{}", log.ids.users[e.user], log.ids.items[e.item], e.timestamp)?;
        }
        Ok(())
    };
    emit().map_err(|e| Error::data(format!("cannot write synthetic CSV: {e}")))
}
