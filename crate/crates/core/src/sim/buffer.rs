use crate::cost::Ticks;
use crate::error::{Error, Result};

/// Accelerator-side staging memory: two alternating on-demand slots and two
/// prefetch groups. Prefetches for stage `t` live in group `t % 2`, so the
/// group being filled is always the one not being computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferPool {
    slots_per_group: usize,
    groups: [Vec<(usize, usize)>; 2],
    /// Tick at which each on-demand slot becomes writable again.
    ondemand_free: [Ticks; 2],
}

impl BufferPool {
    pub fn new(slots_per_group: usize) -> Self {
        BufferPool {
            slots_per_group,
            groups: [Vec::new(), Vec::new()],
            ondemand_free: [0, 0],
        }
    }

    pub fn slots_per_group(&self) -> usize {
        self.slots_per_group
    }

    /// Reserves a prefetch slot for `expert` of stage `target`.
    pub fn reserve(&mut self, target: usize, expert: usize, tick: Ticks) -> Result<()> {
        let group = target % 2;
        let g = &mut self.groups[group];
        if g.len() >= self.slots_per_group {
            return Err(Error::BufferOverflow {
                tick,
                group,
                occupied: g.len(),
                slots: self.slots_per_group,
            });
        }
        g.push((target, expert));
        Ok(())
    }

    pub fn holds(&self, target: usize, expert: usize) -> bool {
        self.groups[target % 2].contains(&(target, expert))
    }

    /// Frees every slot of stage `stage` once its computation is done.
    pub fn release(&mut self, stage: usize) {
        self.groups[stage % 2].retain(|&(t, _)| t != stage);
    }

    pub fn occupied(&self, group: usize) -> usize {
        self.groups[group].len()
    }

    /// The on-demand slot used by the `k`-th load of a layer and when it
    /// frees up.
    pub fn ondemand_slot(&self, k: usize) -> Ticks {
        self.ondemand_free[k % 2]
    }

    pub fn set_ondemand_free(&mut self, k: usize, tick: Ticks) {
        self.ondemand_free[k % 2] = tick;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_alternate_and_overflow_is_explicit() {
        let mut b = BufferPool::new(2);
        b.reserve(1, 3, 0).unwrap();
        b.reserve(1, 4, 0).unwrap();
        b.reserve(2, 4, 0).unwrap();
        assert!(matches!(
            b.reserve(3, 5, 7),
            Err(Error::BufferOverflow {
                tick: 7,
                group: 1,
                occupied: 2,
                slots: 2
            })
        ));
        assert!(b.holds(1, 3) && b.holds(2, 4) && !b.holds(2, 3));
        b.release(1);
        assert_eq!(b.occupied(1), 0);
        assert_eq!(b.occupied(0), 1);
        b.reserve(3, 5, 8).unwrap();
    }

    #[test]
    fn ondemand_slots_alternate() {
        let mut b = BufferPool::new(1);
        b.set_ondemand_free(0, 10);
        b.set_ondemand_free(1, 20);
        assert_eq!(b.ondemand_slot(2), 10);
        assert_eq!(b.ondemand_slot(3), 20);
    }
}
