use std::sync::Mutex;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MailboxStats {
    pub posted: u64,
    pub taken: u64,
    /// Items replaced before anyone took them.
    pub overwritten: u64,
}

/// Single-slot, freshest-wins handoff between a network reader and the
/// simulation step.
#[derive(Debug, Default)]
pub struct Mailbox<T> {
    inner: Mutex<(Option<T>, MailboxStats)>,
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new((None, MailboxStats::default())),
        }
    }

    pub fn post(&self, item: T) {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        g.1.posted += 1;
        if g.0.replace(item).is_some() {
            g.1.overwritten += 1;
        }
    }

    pub fn take(&self) -> Option<T> {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let item = g.0.take();
        if item.is_some() {
            g.1.taken += 1;
        }
        item
    }

    pub fn stats(&self) -> MailboxStats {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}
