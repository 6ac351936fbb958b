//! Toy verifiable task: single-line sums `a+b=` answered by `c\n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rlvr::verifier::Question;
use crate::tokenizer;
use crate::train::TrainBatch;

/// Completions end at a newline.
pub const STOP_TOKEN: u32 = b'\n' as u32;

/// Every `a+b=` with `0 ≤ a, b ≤ max_operand`.
pub fn arithmetic_questions(max_operand: u32) -> Vec<Question> {
    let mut out = Vec::new();
    for a in 0..=max_operand {
        for b in 0..=max_operand {
            out.push(Question {
                id: format!("{a}+{b}"),
                prompt: format!("{a}+{b}="),
                answer: (a + b).to_string(),
            });
        }
    }
    out
}

/// BOS followed by the prompt bytes.
pub fn encode_prompt(question: &Question) -> Vec<u32> {
    let mut t = vec![tokenizer::BOS];
    t.extend(tokenizer::encode(&question.prompt));
    t
}

/// Longest prompt plus completion, in tokens, for operands up to
/// `max_operand`.
pub fn max_row_len(max_operand: u32) -> usize {
    let digits = |v: u32| v.to_string().len();
    1 + 2 * digits(max_operand) + 2 + digits(2 * max_operand) + 1
}

/// Supervised rows `BOS a+b=c\n`, scored on the answer and the newline.
pub fn arithmetic_sft_batch(questions: &[Question], batch: usize, seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(batch);
    let mut loss_mask = Vec::with_capacity(batch);
    for _ in 0..batch {
        let q = &questions[rng.gen_range(0..questions.len())];
        let mut row = encode_prompt(q);
        let prompt_len = row.len();
        row.extend(tokenizer::encode(&q.answer));
        row.push(STOP_TOKEN);
        let mask = (0..row.len()).map(|t| t + 1 >= prompt_len && t + 1 < row.len()).collect();
        tokens.push(row);
        loss_mask.push(mask);
    }
    TrainBatch { tokens, loss_mask }
}
