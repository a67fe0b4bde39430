#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use mm_poe::backend::{MockFixture, ScoreRequest};
use mm_poe::fixtures;
use mm_poe::templating;
use mm_poe::types::{DatasetKind, ImageRef, Mask, QuestionInstance, Split};

pub const STATES_ID: &str = "scienceqa-states";
pub const FOOD_CHAIN_ID: &str = "ai2d-food-chain";

pub fn instance(id: &str, question: &str, options: &[&str], gold: usize) -> QuestionInstance {
    QuestionInstance {
        id: id.into(),
        question: question.into(),
        image: ImageRef::path("img.png"),
        options: options.iter().map(|s| s.to_string()).collect(),
        gold_index: gold,
        dataset: DatasetKind::Custom,
        split: Split::Dev,
    }
}

pub fn states_example() -> QuestionInstance {
    QuestionInstance {
        dataset: DatasetKind::ScienceQa,
        ..instance(
            STATES_ID,
            "Which of these states is farthest north?",
            &["West Virginia", "Louisiana", "Arizona", "Oklahoma"],
            0,
        )
    }
}

pub fn food_chain_example() -> QuestionInstance {
    QuestionInstance {
        dataset: DatasetKind::Ai2d,
        ..instance(
            FOOD_CHAIN_ID,
            "Are phytoplankton predators or prey in this food chain?",
            &["producer", "predator", "prey", "NA"],
            2,
        )
    }
}

/// Step-1 (MCP) and step-2 (masked) values that reproduce the traces shown
/// for the two worked examples: Arizona/Oklahoma eliminated then West
/// Virginia chosen; producer eliminated then prey chosen.
pub fn worked_example_fixture() -> MockFixture {
    let mut fx = MockFixture::default();
    let cases: [(QuestionInstance, [f64; 4], [f64; 4]); 2] = [
        (
            states_example(),
            [-0.5, -0.9, -3.0, -4.0],
            [-0.2, -1.0, f64::NAN, f64::NAN],
        ),
        (
            food_chain_example(),
            [-4.0, -1.0, -0.8, -1.2],
            [f64::NAN, -1.5, -0.3, -2.0],
        ),
    ];
    for (q, step1, step2) in cases {
        for (i, v) in step1.iter().enumerate() {
            let p = templating::render_mcp(&q, i, None, &[]).unwrap();
            fx.insert(&p.parts, vec![*v]);
        }
        let mask = Mask::new(
            step1
                .iter()
                .map(|&v| v >= step1.iter().sum::<f64>() / 4.0)
                .collect(),
        );
        fixtures::pin_masked(&mut fx, &q, &mask, |i| step2[i]).unwrap();
    }
    fx
}

/// Synthetic 4-option instances with varied option lengths and gold indices.
pub fn synthetic(n: usize, split: Split) -> Vec<QuestionInstance> {
    (0..n)
        .map(|k| QuestionInstance {
            id: format!("{split}-{k}"),
            question: format!("Synthetic question number {k} about the picture?"),
            image: ImageRef::path("img.png"),
            options: (0..4)
                .map(|j| {
                    let words = 1 + (k + j) % 3;
                    (0..words)
                        .map(|w| format!("opt{k}x{j}w{w}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect(),
            gold_index: (k * 7 + 3) % 4,
            dataset: DatasetKind::Custom,
            split,
        })
        .collect()
}

/// Writes instances to `dir/data.jsonl` with a shared `img.png` next to it.
pub fn write_dataset(dir: &Path, instances: &[QuestionInstance]) -> PathBuf {
    std::fs::write(dir.join("img.png"), b"\x89PNG\r\n\x1a\nstub").unwrap();
    let path = dir.join("data.jsonl");
    mm_poe::datasets::write_jsonl(&path, instances).unwrap();
    path
}

pub fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Prompt text and continuation joined by the golden-file boundary marker.
pub fn golden_form(p: &mm_poe::PromptParts) -> String {
    format!("{}⟦SCORE⟧{}", p.render_text(), p.continuation)
}

/// Minimal HTTP server speaking the scoring protocol.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub peak_concurrent: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

pub struct StubReply {
    pub status: u16,
    pub body: String,
    pub delay_ms: u64,
}

impl StubReply {
    pub fn ok(tokens: &[&str], logprobs: &[f64]) -> Self {
        let body = serde_json::json!({ "tokens": tokens, "token_logprobs": logprobs }).to_string();
        Self {
            status: 200,
            body,
            delay_ms: 0,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: "{}".into(),
            delay_ms: 0,
        }
    }

    pub fn raw(body: &str) -> Self {
        Self {
            status: 200,
            body: body.into(),
            delay_ms: 0,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }
}

impl StubServer {
    /// Each request is handled on its own thread; `reply` sees the parsed
    /// request and the zero-based request number.
    pub fn start<F>(reply: F) -> Self
    where
        F: Fn(&ScoreRequest, usize) -> StubReply + Send + Sync + 'static,
    {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}/score", server.server_addr().to_ip().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let reply = Arc::new(reply);
        let handle = {
            let server = server.clone();
            let requests = requests.clone();
            let peak = peak.clone();
            std::thread::spawn(move || {
                let mut workers = Vec::new();
                for mut req in server.incoming_requests() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let reply = reply.clone();
                    let current = current.clone();
                    let peak = peak.clone();
                    workers.push(std::thread::spawn(move || {
                        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let parsed: ScoreRequest =
                            serde_json::from_str(&body).expect("valid request");
                        let r = reply(&parsed, n);
                        if r.delay_ms > 0 {
                            std::thread::sleep(std::time::Duration::from_millis(r.delay_ms));
                        }
                        current.fetch_sub(1, Ordering::SeqCst);
                        let resp = tiny_http::Response::from_string(r.body)
                            .with_status_code(r.status)
                            .with_header(
                                "Content-Type: application/json"
                                    .parse::<tiny_http::Header>()
                                    .unwrap(),
                            );
                        let _ = req.respond(resp);
                    }));
                }
                for w in workers {
                    let _ = w.join();
                }
            })
        };
        Self {
            url,
            requests,
            peak_concurrent: peak,
            server,
            handle: Some(handle),
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Exact mean of `scores` as a rational, and the keep-mask obtained by a
/// strict comparison against it.
pub fn oracle_mask(scores: &[f64]) -> (num_rational::BigRational, Vec<bool>) {
    use num_rational::BigRational;
    let exact: Vec<BigRational> = scores
        .iter()
        .map(|&s| BigRational::from_float(s).expect("finite score"))
        .collect();
    let n = BigRational::from_integer(scores.len().into());
    let mean = exact
        .iter()
        .fold(BigRational::from_integer(0.into()), |a, b| a + b)
        / n;
    let keep = exact.iter().map(|s| *s >= mean).collect();
    (mean, keep)
}

/// Backend answering from two per-letter tables: one for unmasked prompts,
/// one for prompts carrying the step-2 instruction.
pub struct TableBackend {
    pub step1: Vec<f64>,
    pub step2: Vec<f64>,
}

impl mm_poe::ScorerBackend for TableBackend {
    fn capabilities(&self) -> mm_poe::backend::BackendCapabilities {
        mm_poe::backend::BackendCapabilities {
            supports_images: true,
            max_images_per_request: 16,
            supports_per_token: false,
        }
    }

    fn score_continuation(
        &self,
        parts: &mm_poe::PromptParts,
    ) -> Result<mm_poe::ContinuationScore, mm_poe::backend::BackendError> {
        let letter = parts.continuation.chars().next().unwrap();
        let i = (letter as u8 - b'A') as usize;
        let table = if parts.render_text().contains(templating::STEP2_INSTRUCTION) {
            &self.step2
        } else {
            &self.step1
        };
        Ok(mm_poe::ContinuationScore {
            sum_logprob: table[i],
            token_count: 1,
            per_token: None,
        })
    }
}

/// Instance with `n` distinct options for table-driven scoring.
pub fn n_option_instance(n: usize) -> QuestionInstance {
    let opts: Vec<String> = (0..n).map(|i| format!("choice {i}")).collect();
    let refs: Vec<&str> = opts.iter().map(String::as_str).collect();
    instance("table", "Which choice?", &refs, 0)
}

fn put(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// ScienceQA-layout directory with a known mix of keepable and droppable
/// problems. Returns `(read, kept, no_image, option_count, invalid)`.
pub fn scienceqa_fixture(dir: &Path) -> (usize, usize, usize, usize, usize) {
    let four = serde_json::json!(["a", "b", "c", "d"]);
    let problems = serde_json::json!({
        "1": {"question": "Q1?", "choices": four, "answer": 0, "image": "image.png", "split": "train"},
        "2": {"question": "Q2?", "choices": four, "answer": 3, "image": "image.png", "split": "val"},
        "3": {"question": "Q3?", "choices": four, "answer": 1, "image": "image.png", "split": "test"},
        "4": {"question": "Q4?", "choices": four, "answer": 2, "image": null, "split": "train"},
        "5": {"question": "Q5?", "choices": four, "answer": 2, "image": "missing.png", "split": "train"},
        "6": {"question": "Q6?", "choices": ["a", "b", "c"], "answer": 0, "image": "image.png", "split": "train"},
        "7": {"question": "Q7?", "choices": ["a", "b", "c", "d", "e"], "answer": 0, "image": "image.png", "split": "test"},
        "8": {"question": "Q8?", "choices": ["a", "a ", "c", "d"], "answer": 0, "image": "image.png", "split": "train"},
        "9": {"question": "Q9?", "choices": four, "answer": 4, "image": "image.png", "split": "train"},
        "10": {"choices": four, "answer": 0, "image": "image.png", "split": "train"},
        "11": {"question": "Q11?", "choices": ["a", "b"], "answer": 0, "image": null, "split": "val"},
        "12": {"question": "Q12?", "choices": four, "answer": 0, "image": "image.png", "split": "val"}
    });
    put(&dir.join("problems.json"), problems.to_string().as_bytes());
    for (id, split) in [
        ("1", "train"),
        ("2", "val"),
        ("6", "train"),
        ("7", "test"),
        ("8", "train"),
        ("9", "train"),
        ("10", "train"),
    ] {
        put(
            &dir.join("images").join(split).join(id).join("image.png"),
            b"png",
        );
    }
    put(&dir.join("test/3/image.png"), b"png");
    put(&dir.join("val/12/image.png"), b"png");
    // read, kept (1,2,3,12), no image (4,5,11), option count (6,7), invalid (8,9,10)
    (12, 4, 3, 2, 3)
}

/// AI2D-layout directory. Returns `(read, kept, no_image, option_count, invalid)`.
pub fn ai2d_fixture(dir: &Path) -> (usize, usize, usize, usize, usize) {
    let q = |id: &str, opts: &[&str], ans: i64| serde_json::json!({"answerTexts": opts, "correctAnswer": ans, "questionId": id});
    let docs = [
        (
            "0",
            "0.png",
            serde_json::json!({
                "What eats algae?": q("0.png-0", &["fish", "snail", "crab", "bird"], 1),
                "How many stages?": q("0.png-1", &["1", "2", "3"], 2),
            }),
        ),
        (
            "1",
            "1.png",
            serde_json::json!({
                "Which is prey?": q("1.png-0", &["producer", "predator", "prey", "NA"], 2),
                "Which is big?": q("1.png-1", &["a", "b", "c", "d", "e"], 0),
                "Which repeats?": q("1.png-2", &["x", "x", "y", "z"], 0),
            }),
        ),
        (
            "2",
            "2.png",
            serde_json::json!({
                "Where is the sun?": q("2.png-0", &["up", "down", "left", "right"], 0),
            }),
        ),
        (
            "10",
            "10.png",
            serde_json::json!({
                "What is shown?": q("10.png-0", &["m", "n", "o", "p"], 3),
            }),
        ),
    ];
    for (stem, image, questions) in docs {
        let doc = serde_json::json!({"imageName": image, "questions": questions});
        put(
            &dir.join("questions").join(format!("{stem}.json")),
            doc.to_string().as_bytes(),
        );
    }
    for img in ["0.png", "1.png", "10.png"] {
        put(&dir.join("images").join(img), b"png");
    }
    put(&dir.join("ai2d_test_ids.csv"), b"1\n10\n");
    // kept: 0.png-0 (train), 1.png-0 (dev), 10.png-0 (dev); no image: 2.png-0;
    // option count: 0.png-1, 1.png-1; invalid: 1.png-2
    (7, 3, 1, 2, 1)
}
