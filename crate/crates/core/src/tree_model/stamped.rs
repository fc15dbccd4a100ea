use std::fmt;
use std::sync::{Arc, Mutex};

/// Version token guarding a [`StampedResource`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct StampToken(pub i64);

impl StampToken {
    pub fn next(self) -> StampToken {
        StampToken(self.0 + 1)
    }
}

impl fmt::Display for StampToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Accepted,
    RejectedStale,
}

impl WriteOutcome {
    pub fn is_accepted(self) -> bool {
        self == WriteOutcome::Accepted
    }
}

/// Flushing from a stamp other than the current one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("flush from stamp {requested} but resource is at {current}")]
pub struct StaleFlush {
    pub requested: StampToken,
    pub current: StampToken,
}

struct Inner<T> {
    stamp: StampToken,
    payload: Arc<T>,
}

/// Shared mutable state whose writes are applied only when they carry the
/// current stamp. Reads hand out immutable snapshots.
pub struct StampedResource<T> {
    inner: Mutex<Inner<T>>,
}

impl<T: fmt::Debug> fmt::Debug for StampedResource<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = self.inner.lock().unwrap();
        f.debug_struct("StampedResource")
            .field("stamp", &g.stamp)
            .field("payload", &g.payload)
            .finish()
    }
}

impl<T: Clone> StampedResource<T> {
    pub fn new(payload: T) -> Self {
        Self::with_stamp(StampToken(0), payload)
    }

    pub fn with_stamp(stamp: StampToken, payload: T) -> Self {
        Self {
            inner: Mutex::new(Inner {
                stamp,
                payload: Arc::new(payload),
            }),
        }
    }

    pub fn read(&self) -> (StampToken, Arc<T>) {
        let g = self.inner.lock().unwrap();
        (g.stamp, Arc::clone(&g.payload))
    }

    pub fn stamp(&self) -> StampToken {
        self.inner.lock().unwrap().stamp
    }

    /// Applies `update` iff `stamp` is current. Outstanding snapshots are
    /// left untouched (copy on write).
    pub fn write(&self, stamp: StampToken, update: impl FnOnce(&mut T)) -> WriteOutcome {
        let mut g = self.inner.lock().unwrap();
        if g.stamp != stamp {
            return WriteOutcome::RejectedStale;
        }
        update(Arc::make_mut(&mut g.payload));
        WriteOutcome::Accepted
    }

    /// Moves the resource from `from` to `from + 1`, letting `f` transform
    /// the payload (typically draining it) in the same critical section.
    pub fn flush<R>(
        &self,
        from: StampToken,
        f: impl FnOnce(&mut T) -> R,
    ) -> Result<R, StaleFlush> {
        let mut g = self.inner.lock().unwrap();
        if g.stamp != from {
            return Err(StaleFlush {
                requested: from,
                current: g.stamp,
            });
        }
        let out = f(Arc::make_mut(&mut g.payload));
        g.stamp = from.next();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_resource_reads_stamp_zero() {
        let r = StampedResource::new(vec![1, 2]);
        let (s, p) = r.read();
        assert_eq!(s, StampToken(0));
        assert_eq!(*p, vec![1, 2]);
    }

    #[test]
    fn flush_increments_by_one() {
        let r = StampedResource::new(0u32);
        r.flush(StampToken(0), |_| ()).unwrap();
        assert_eq!(r.read().0, StampToken(1));
        assert!(r.flush(StampToken(0), |_| ()).is_err());
    }

    #[test]
    fn write_is_visible_to_later_reads_only() {
        let r = StampedResource::new(vec![0]);
        let (s, before) = r.read();
        assert!(r.write(s, |v| v.push(7)).is_accepted());
        let (s2, after) = r.read();
        assert_eq!(s2, s);
        assert_eq!(*before, vec![0]);
        assert_eq!(*after, vec![0, 7]);
    }

    #[test]
    fn stale_write_is_rejected() {
        let r = StampedResource::new(10);
        r.flush(StampToken(0), |_| ()).unwrap();
        assert_eq!(r.write(StampToken(0), |v| *v += 1), WriteOutcome::RejectedStale);
        assert_eq!(*r.read().1, 10);
    }

    #[test]
    fn writes_with_same_stamp_compose() {
        let r = StampedResource::new(1);
        assert!(r.write(StampToken(0), |v| *v += 2).is_accepted());
        assert!(r.write(StampToken(0), |v| *v *= 5).is_accepted());
        assert_eq!(*r.read().1, 15);
    }
}
