#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kermit/attention.h"
#include "kermit/model.h"
#include "kermit/tape.h"

namespace kermit {

// Raw acoustic frames, T x d.
using FeatureSequence = Matrix;

// Token positions live in their own index range so that token and audio
// encodings never coincide.
inline constexpr std::size_t kTokenPositionOffset = 10000;

// rows x width sinusoidal table for positions first_position, first_position+1, ...
Matrix sinusoidal_encoding(std::size_t rows, std::size_t width, std::size_t first_position);

// Concatenates non-overlapping groups of `s` frames: floor(T/s) x (s*d).
// Leftover frames are dropped.
Matrix stack_frames(const FeatureSequence& x, std::size_t s);

// Stacked frames projected by embed.audio plus the positional table starting
// at `first_position` (in subsampled frames). Throws if T < s.
Var embed_audio(Tape& tape, const Model& model, const FeatureSequence& x,
                std::size_t first_position = 0);

// embed.token rows plus token positional encodings. Accepts ordinary tokens
// and both sentinels; throws VocabularyError otherwise.
Var embed_tokens(Tape& tape, const Model& model, std::span<const int> ids);

struct EncoderOutput {
  Var h_feat;  // T^SS x d_model
  Var h_tok;   // N^hyp x d_model
};

// Full two-stream pass. Frame blocks use extended block self-attention over
// [previous block; block; token stream], the token stream attends to all
// frames and itself; both share the layer weights.
EncoderOutput forward_joint(Tape& tape, const Model& model, Var x_emb, Var c_emb);

// Frame stream only, with the same token memory `memory` (already embedded)
// used as extra keys at every layer. This is what the causal path computes
// block by block.
Var forward_frames_static_memory(Tape& tape, const Model& model, Var x_emb, Var memory);

// Streaming state of the causal frame pass: per layer, the input activations
// of the previous block.
struct BlockCache {
  std::vector<Matrix> prev;  // one entry per layer, empty before the first block
  std::size_t block_index = 0;
  Matrix memory;             // embedded <s>, 1 x d_model

  std::size_t layers() const { return prev.size(); }
};

BlockCache make_block_cache(const Model& model);

// Computes one new block of the frame stream at every layer, reading and
// replacing the cached previous block. Returns the last-layer activations.
Matrix forward_frames_causal(const Model& model, const Matrix& x_emb_block, BlockCache& cache);

}  // namespace kermit
