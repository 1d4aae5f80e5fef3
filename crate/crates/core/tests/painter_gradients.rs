mod common;

use common::gradients;

#[test]
fn encode_gradients() {
    gradients::encode_gradients(10);
}

#[test]
fn predict_noise_gradients() {
    gradients::predict_noise_gradients(10);
}

#[test]
fn attention_gradients() {
    gradients::attention_gradients(10);
}

#[test]
fn decode_gradients() {
    gradients::decode_gradients(10);
}

#[test]
fn full_paint_gradients() {
    gradients::full_paint_gradients(3);
}
