use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use exbank_core::bank::{ExemplarBank, ExemplarRecord};
use exbank_core::corpus::{build_master_table, BankSplit, CorpusFormat};
use exbank_core::embed::{Embedder, HashedNgramEmbedder};
use exbank_core::prompt::{PromptCondition, StaticExemplars, TemplateStore};
use exbank_core::synth::{synthetic_corpus, to_jsonl, SynthConfig};
use exbank_gateway::{
    run_matrix, ChatProvider, ChatRequest, ChatResponse, Gateway, GenerationCache, MatrixSpec, MockProvider,
    ModelConfig, ProviderError,
};

struct Fixture {
    split: BankSplit,
    bank: ExemplarBank,
    embedder: Embedder,
    templates: TemplateStore,
    statics: StaticExemplars,
    vocabulary: Vec<String>,
    models: Vec<ModelConfig>,
}

fn fixture(test_per_language: usize) -> Fixture {
    let config =
        SynthConfig { articles_per_language: test_per_language * 2, edge_case_rate: 0.1, ..Default::default() };
    let raw = to_jsonl(&synthetic_corpus(&config));
    let holdout = [("fa".to_string(), test_per_language), ("it".to_string(), test_per_language)].into();
    let (split, _) = build_master_table(raw.as_bytes(), &CorpusFormat::default(), &holdout, 11).unwrap();
    let embedder = Embedder::new(Arc::new(HashedNgramEmbedder::new(3, 512)));
    let bank = ExemplarBank::from_split(&split, &embedder).unwrap();
    let vocabulary = config.severity_vocabulary.clone();
    let templates = TemplateStore::defaults(&["fa", "it"], &vocabulary).unwrap();
    let mut statics = Vec::new();
    for lang in ["fa", "it"] {
        statics.extend(split.bank.iter().filter(|a| a.language == lang).take(3).map(ExemplarRecord::from));
    }
    Fixture {
        split,
        bank,
        embedder,
        templates,
        statics: StaticExemplars::new(statics),
        vocabulary,
        models: ModelConfig::defaults(),
    }
}

fn spec<'a>(f: &'a Fixture, conditions: &'a [PromptCondition]) -> MatrixSpec<'a> {
    MatrixSpec {
        items: &f.split.test,
        conditions,
        models: &f.models,
        bank: Some(&f.bank),
        embedder: Some(&f.embedder),
        templates: &f.templates,
        statics: &f.statics,
        k: 3,
        vocabulary: &f.vocabulary,
        concurrency: 4,
    }
}

/// Mock that refuses every call after the first `limit`.
struct Interrupted {
    inner: MockProvider,
    limit: usize,
    served: AtomicUsize,
}

impl ChatProvider for Interrupted {
    fn name(&self) -> &str {
        "interrupted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        if self.served.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(ProviderError::Status { code: 400, body: "interrupted".into() });
        }
        self.inner.complete(request)
    }
}

#[test]
fn pilot_matrix_is_complete_and_reproducible() {
    let f = fixture(100);
    let conditions = PromptCondition::ALL;
    let spec = spec(&f, &conditions);
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(GenerationCache::open(&dir.path().join("cache.jsonl")).unwrap());
    let mock = Arc::new(MockProvider::new(f.vocabulary.clone()));
    let gateway = Gateway::new(mock.clone(), cache.clone());

    let started = Instant::now();
    let first = run_matrix(&spec, &gateway).unwrap();
    assert!(started.elapsed().as_secs() < 60);
    assert_eq!(first.cells.len(), 1600);
    assert!(first.failures.is_empty());
    assert!(mock.calls() <= cache.len());
    first.write(&dir.path().join("run1"), &first.manifest(&spec)).unwrap();

    let second = run_matrix(&spec, &gateway).unwrap();
    second.write(&dir.path().join("run2"), &second.manifest(&spec)).unwrap();
    assert_eq!(mock.calls(), cache.len());
    for file in ["cells.jsonl", "failures.jsonl", "manifest.json"] {
        let a = std::fs::read(dir.path().join("run1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }

    // M1 and A1 share the item's retrieval
    let by_id: BTreeMap<&str, _> = first.cells.iter().map(|c| (c.cell_id.as_str(), c)).collect();
    for item in &f.split.test {
        for m in &f.models {
            let m1 = by_id[format!("{}::M1::{}", item.article_id, m.id).as_str()];
            let a1 = by_id[format!("{}::A1::{}", item.article_id, m.id).as_str()];
            assert_eq!(m1.injected_ids, a1.injected_ids);
            assert_eq!(m1.injected_ids.len(), 3);
            assert!(!m1.injected_ids.contains(&item.article_id));
        }
    }
}

#[test]
fn resume_only_requests_missing_cells() {
    let f = fixture(100);
    let conditions = PromptCondition::ALL;
    let spec = spec(&f, &conditions);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");

    let interrupted = Arc::new(Interrupted {
        inner: MockProvider::new(f.vocabulary.clone()),
        limit: 500,
        served: AtomicUsize::new(0),
    });
    let out = run_matrix(&spec, &Gateway::new(interrupted, Arc::new(GenerationCache::open(&path).unwrap()))).unwrap();
    assert_eq!(out.cells.len(), 500);
    assert_eq!(out.failures.len(), 1100);

    let mock = Arc::new(MockProvider::new(f.vocabulary.clone()));
    let resumed =
        run_matrix(&spec, &Gateway::new(mock.clone(), Arc::new(GenerationCache::open(&path).unwrap()))).unwrap();
    assert_eq!(mock.calls(), 1100);
    assert_eq!(resumed.cells.len(), 1600);
}

#[test]
fn failed_cell_leaves_others_untouched() {
    let f = fixture(10);
    let conditions = [PromptCondition::B0, PromptCondition::A1];
    let spec = spec(&f, &conditions);
    let baseline = run_matrix(
        &spec,
        &Gateway::new(Arc::new(MockProvider::new(f.vocabulary.clone())), Arc::new(GenerationCache::in_memory())),
    )
    .unwrap();

    struct FailOne(MockProvider, String);
    impl ChatProvider for FailOne {
        fn name(&self) -> &str {
            "fail-one"
        }
        fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            if r.cell_id == self.1 {
                Err(ProviderError::Status { code: 422, body: "rejected".into() })
            } else {
                self.0.complete(r)
            }
        }
    }
    let victim = baseline.cells[3].cell_id.clone();
    let provider = Arc::new(FailOne(MockProvider::new(f.vocabulary.clone()), victim.clone()));
    let out = run_matrix(&spec, &Gateway::new(provider, Arc::new(GenerationCache::in_memory()))).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].cell_id, victim);
    let strip = |cells: &[exbank_gateway::CellResult]| -> Vec<(String, String, Vec<String>)> {
        cells
            .iter()
            .filter(|c| c.cell_id != victim)
            .map(|c| (c.cell_id.clone(), c.generation.text.clone(), c.injected_ids.clone()))
            .collect()
    };
    assert_eq!(strip(&out.cells), strip(&baseline.cells));
}

#[test]
fn retrieval_conditions_need_a_bank() {
    let f = fixture(10);
    let conditions = [PromptCondition::M1];
    let mut s = spec(&f, &conditions);
    s.bank = None;
    let gw = Gateway::new(Arc::new(MockProvider::new(vec![])), Arc::new(GenerationCache::in_memory()));
    assert!(run_matrix(&s, &gw).is_err());

    let conditions = [PromptCondition::B0];
    let mut s = spec(&f, &conditions);
    s.bank = None;
    s.embedder = None;
    assert_eq!(run_matrix(&s, &gw).unwrap().cells.len(), 40);
}
