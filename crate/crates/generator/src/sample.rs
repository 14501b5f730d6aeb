//! Constrained left-to-right sampling of one message.

use lobgen_core::model_api::ConditionalTokenModel;
use lobgen_core::tokenizer::{
    decode, decode_dt, encode_time, generation_mask, EncodedMessage, FieldMask, Token, HID, MASKABLE_POSITIONS, POS_DT,
    POS_TIME, TOKENS_PER_MESSAGE,
};
use lobgen_core::Message;
use rand::Rng;

use crate::context::{GenerationContext, StepRecord};

/// Draws a token from `softmax(logits)` restricted to `mask`, at
/// temperature 1 and without truncation. A mask on which every logit is
/// `-inf` is sampled uniformly.
pub fn sample_token(logits: &[f32], mask: &FieldMask, rng: &mut impl Rng) -> Token {
    let max = mask.iter().map(|t| logits[t as usize]).fold(f32::NEG_INFINITY, f32::max);
    let u: f64 = rng.random();
    if !max.is_finite() {
        let k = ((u * mask.len() as f64) as usize).min(mask.len() - 1);
        return mask.iter().nth(k).expect("mask is non-empty");
    }
    let weight = |t: Token| ((logits[t as usize] - max) as f64).exp();
    let total: f64 = mask.iter().map(weight).sum();
    let mut acc = 0.0;
    let target = u * total;
    let mut last = None;
    for t in mask.iter() {
        let w = weight(t);
        acc += w;
        if w > 0.0 {
            last = Some(t);
        }
        if acc > target && w > 0.0 {
            return t;
        }
    }
    last.expect("some token has positive weight")
}

/// Samples the 17 maskable positions in order; the arrival time is derived
/// from `last_time_ns` and the sampled inter-arrival time. Positions with a
/// single admissible token skip the model.
pub fn sample_message<M: ConditionalTokenModel>(
    model: &M,
    prefix: &M::Prefix,
    last_time_ns: u64,
    rng: &mut impl Rng,
) -> EncodedMessage {
    let mut tokens = [HID; TOKENS_PER_MESSAGE];
    for &pos in MASKABLE_POSITIONS.iter() {
        let mask = generation_mask(&tokens[..pos], pos);
        tokens[pos] = if mask.len() == 1 {
            // forced, e.g. the reference fields of a new limit order
            mask.iter().next().expect("one admissible token")
        } else {
            let logits = model.logits(prefix, &EncodedMessage(tokens).masked_at(pos));
            sample_token(&logits, &mask, rng)
        };
        if pos == POS_DT + 3 {
            let dt = decode_dt(&tokens).expect("sampled from the field mask");
            tokens[POS_TIME..POS_TIME + 5].copy_from_slice(&encode_time(last_time_ns.saturating_add(dt)));
        }
    }
    EncodedMessage(tokens)
}

/// Samples, decodes and applies one message.
pub fn generate_step<M: ConditionalTokenModel>(
    model: &M,
    ctx: &mut GenerationContext,
    rng: &mut impl Rng,
) -> StepRecord {
    let (history, books) = ctx.model_inputs();
    let prefix = model.prepare(&history, &books);
    let enc = sample_message(model, &prefix, ctx.last_time_ns, rng);
    let msg: Message = decode(&enc).expect("generation masks only admit valid messages");
    ctx.apply(&msg)
}

/// Runs the generation loop for `steps` messages.
pub fn generate<M: ConditionalTokenModel>(
    model: &M,
    ctx: &mut GenerationContext,
    steps: usize,
    rng: &mut impl Rng,
) -> Vec<StepRecord> {
    assert_eq!(model.window(), ctx.n, "model window and context differ");
    (0..steps).map(|_| generate_step(model, ctx, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobgen_core::tokenizer::{validity_mask, MSK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_respects_the_mask_and_the_weights() {
        let mask = validity_mask(&[], 1);
        let mut logits = vec![0.0f32; 12011];
        let toks: Vec<Token> = mask.iter().collect();
        logits[toks[1] as usize] = (3.0f32).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = 0;
        for _ in 0..20_000 {
            let t = sample_token(&logits, &mask, &mut rng);
            assert!(mask.contains(t));
            hits += usize::from(t == toks[1]);
        }
        let p = hits as f64 / 20_000.0;
        assert!((p - 0.75).abs() < 0.015, "{p}");
    }

    #[test]
    fn all_negative_infinity_falls_back_to_uniform() {
        let mask = validity_mask(&[], 1);
        let logits = vec![f32::NEG_INFINITY; 12011];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_token(&logits, &mask, &mut rng);
        assert!(mask.contains(t) && t != MSK);
    }
}
