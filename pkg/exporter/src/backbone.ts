/**
 * Deterministic seeded vision transformer producing multi-layer patch
 * descriptor stacks.
 *
 * The network has the standard large-ViT shape — 14 px patches, 1024-wide
 * tokens, 16 heads, 4x MLP, 24 pre-norm blocks, one class token plus 4
 * register tokens — but its weights come from a fixed SplitMix64 stream
 * rather than a pretrained checkpoint, so exports are reproducible anywhere
 * with no model download. After every block the patch-token slice (class and
 * register tokens dropped) is recorded as one stack layer.
 */

import * as tf from '@tensorflow/tfjs';
import { SplitMix64, childStream, U64 } from './prng.js';
import { RgbImage } from './image.js';
import { DescriptorStack } from './pdsk.js';

export interface BackboneConfig {
  layers: number;
  channels: number;
  heads: number;
  mlpRatio: number;
  patch: number;
  registers: number;
  seed: U64;
}

export const VIT_L: BackboneConfig = {
  layers: 24,
  channels: 1024,
  heads: 16,
  mlpRatio: 4,
  patch: 14,
  registers: 4,
  seed: [0, 0x5eed],
};

const LN_EPS = 1e-6;

interface BlockWeights {
  qkv: Float32Array; // (c, 3c)
  proj: Float32Array; // (c, c)
  fc1: Float32Array; // (c, mlp)
  fc2: Float32Array; // (mlp, c)
}

interface Weights {
  patchEmbed: Float32Array; // (3*patch*patch, c)
  specials: Float32Array; // (1 + registers, c) class + register tokens
  blocks: BlockWeights[];
}

function uniformInit(rng: SplitMix64, rows: number, cols: number): Float32Array {
  // +-sqrt(3/fan_in) keeps unit-order activations under the pre-norm blocks
  const bound = Math.sqrt(3 / rows);
  return rng.fillUniform(new Float32Array(rows * cols), bound);
}

function buildWeights(config: BackboneConfig): Weights {
  const { channels: c, mlpRatio, patch, registers, seed } = config;
  let ordinal = 0;
  const stream = () => childStream(seed, ordinal++);
  const patchEmbed = uniformInit(stream(), 3 * patch * patch, c);
  const specials = stream().fillUniform(
    new Float32Array((1 + registers) * c),
    0.02,
  );
  const blocks: BlockWeights[] = [];
  for (let b = 0; b < config.layers; b++) {
    blocks.push({
      qkv: uniformInit(stream(), c, 3 * c),
      proj: uniformInit(stream(), c, c),
      fc1: uniformInit(stream(), c, mlpRatio * c),
      fc2: uniformInit(stream(), mlpRatio * c, c),
    });
  }
  return { patchEmbed, specials, blocks };
}

/** Fixed 2D sine/cosine position signal for an Hp x Wp patch grid. */
function positionSignal(hp: number, wp: number, c: number): Float32Array {
  const quarter = c / 4;
  const out = new Float32Array(hp * wp * c);
  for (let r = 0; r < hp; r++) {
    for (let col = 0; col < wp; col++) {
      const base = (r * wp + col) * c;
      for (let j = 0; j < quarter; j++) {
        const w = Math.pow(10000, -j / quarter);
        out[base + 4 * j] = Math.sin(r * w);
        out[base + 4 * j + 1] = Math.cos(r * w);
        out[base + 4 * j + 2] = Math.sin(col * w);
        out[base + 4 * j + 3] = Math.cos(col * w);
      }
    }
  }
  return out;
}

/** (Hp*Wp, 3*patch*patch) rows of flattened patches, values mapped to [-1, 1]. */
function patchify(img: RgbImage, patch: number): Float32Array {
  const hp = img.height / patch;
  const wp = img.width / patch;
  const rowLen = 3 * patch * patch;
  const out = new Float32Array(hp * wp * rowLen);
  for (let pr = 0; pr < hp; pr++) {
    for (let pc = 0; pc < wp; pc++) {
      const dst = (pr * wp + pc) * rowLen;
      for (let y = 0; y < patch; y++) {
        for (let x = 0; x < patch; x++) {
          const src = 3 * ((pr * patch + y) * img.width + pc * patch + x);
          const k = dst + 3 * (y * patch + x);
          out[k] = img.data[src] * 2 - 1;
          out[k + 1] = img.data[src + 1] * 2 - 1;
          out[k + 2] = img.data[src + 2] * 2 - 1;
        }
      }
    }
  }
  return out;
}

function layerNorm(x: tf.Tensor2D): tf.Tensor2D {
  const mean = x.mean(-1, true);
  const centered = x.sub(mean);
  const variance = centered.square().mean(-1, true);
  return centered.div(variance.add(LN_EPS).sqrt());
}

function gelu(x: tf.Tensor): tf.Tensor {
  // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  const inner = x.add(x.pow(3).mul(0.044715)).mul(0.7978845608028654);
  return x.mul(inner.tanh().add(1)).mul(0.5);
}

export class Backbone {
  private weights: Weights | null = null;

  constructor(readonly config: BackboneConfig = VIT_L) {
    const { channels, heads } = config;
    if (channels % heads !== 0 || channels % 4 !== 0) {
      throw new Error('channels must divide evenly by heads and by 4');
    }
  }

  /** Generate (once) and keep the full weight set in plain JS arrays. */
  ensureWeights(): Weights {
    if (this.weights === null) {
      this.weights = buildWeights(this.config);
    }
    return this.weights;
  }

  /**
   * Run the transformer on a square image whose side is a multiple of the
   * patch size; returns the per-block patch-token stack.
   */
  forward(img: RgbImage): DescriptorStack {
    const { layers, channels: c, heads, patch, registers } = this.config;
    if (img.height % patch !== 0 || img.width % patch !== 0) {
      throw new Error(`image sides must be multiples of ${patch}`);
    }
    const w = this.ensureWeights();
    const hp = img.height / patch;
    const wp = img.width / patch;
    const nPatches = hp * wp;
    const nSpecial = 1 + registers;
    const tokens = nSpecial + nPatches;
    const headDim = c / heads;
    const out = new Float32Array(layers * nPatches * c);

    let x = tf.tidy(() => {
      const patches = tf.tensor2d(patchify(img, patch), [
        nPatches,
        3 * patch * patch,
      ]);
      const embedded = patches
        .matMul(tf.tensor2d(w.patchEmbed, [3 * patch * patch, c]))
        .add(tf.tensor2d(positionSignal(hp, wp, c), [nPatches, c]));
      const specials = tf.tensor2d(w.specials, [nSpecial, c]);
      return tf.concat([specials, embedded], 0) as tf.Tensor2D;
    });

    for (let b = 0; b < layers; b++) {
      const block = w.blocks[b];
      const next = tf.tidy(() => {
        const qkv = layerNorm(x).matMul(tf.tensor2d(block.qkv, [c, 3 * c]));
        const split = (offset: number) =>
          qkv
            .slice([0, offset * c], [tokens, c])
            .reshape([tokens, heads, headDim])
            .transpose([1, 0, 2]) as tf.Tensor3D;
        const q = split(0);
        const k = split(1);
        const v = split(2);
        const scores = tf
          .matMul(q, k, false, true)
          .mul(1 / Math.sqrt(headDim));
        const attended = tf
          .matMul(tf.softmax(scores), v)
          .transpose([1, 0, 2])
          .reshape([tokens, c]) as tf.Tensor2D;
        const afterAttn = x.add(
          attended.matMul(tf.tensor2d(block.proj, [c, c])),
        ) as tf.Tensor2D;
        const hidden = gelu(
          layerNorm(afterAttn).matMul(
            tf.tensor2d(block.fc1, [c, this.config.mlpRatio * c]),
          ),
        ) as tf.Tensor2D;
        return afterAttn.add(
          hidden.matMul(tf.tensor2d(block.fc2, [this.config.mlpRatio * c, c])),
        ) as tf.Tensor2D;
      });
      x.dispose();
      x = next;
      // record this block's patch tokens (class/register tokens dropped)
      const slice = tf.tidy(() => x.slice([nSpecial, 0], [nPatches, c]));
      out.set(slice.dataSync() as Float32Array, b * nPatches * c);
      slice.dispose();
    }
    x.dispose();
    return { layers, rows: hp, cols: wp, channels: c, data: out };
  }
}

let shared: Backbone | null = null;

/** Process-wide backbone so repeated exports reuse the generated weights. */
export function sharedBackbone(): Backbone {
  if (shared === null) {
    shared = new Backbone(VIT_L);
  }
  return shared;
}
