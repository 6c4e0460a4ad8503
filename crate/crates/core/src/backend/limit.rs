use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use tokio::sync::Semaphore;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, SearchBackend, SearchResult};

/// Observes how many calls are in flight through a [`Limited`] wrapper.
#[derive(Debug, Default)]
pub struct InFlightProbe {
    current: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl InFlightProbe {
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

struct ProbeGuard<'a>(Option<&'a InFlightProbe>);

impl Drop for ProbeGuard<'_> {
    fn drop(&mut self) {
        if let Some(p) = self.0 {
            p.exit();
        }
    }
}

/// Caps concurrent calls to the wrapped backend.
pub struct Limited<B> {
    inner: B,
    permits: Arc<Semaphore>,
    probe: Option<Arc<InFlightProbe>>,
}

impl<B> Limited<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        Self {
            inner,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
            probe: None,
        }
    }

    pub fn with_probe(mut self, probe: Arc<InFlightProbe>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    // Guard first so the probe is decremented before the permit is released.
    async fn enter(&self) -> (ProbeGuard<'_>, tokio::sync::SemaphorePermit<'_>) {
        let permit = self.permits.acquire().await.expect("semaphore never closed");
        if let Some(p) = &self.probe {
            p.enter();
        }
        (ProbeGuard(self.probe.as_deref()), permit)
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for Limited<B> {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _slot = self.enter().await;
        self.inner.chat(request).await
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

#[async_trait]
impl<B: SearchBackend> SearchBackend for Limited<B> {
    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchResult>, BackendError> {
        let _slot = self.enter().await;
        self.inner.search(query, k).await
    }

    async fn fetch_page(&self, url: &str) -> Result<String, BackendError> {
        let _slot = self.enter().await;
        self.inner.fetch_page(url).await
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}
