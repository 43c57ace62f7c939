import { beforeAll, describe, expect, it } from 'vitest';
import { Backbone, BackboneConfig, VIT_L } from '../src/backbone.js';
import { initBackend } from '../src/export.js';
import { RgbImage } from '../src/image.js';

// A scaled-down network keeps these behaviour checks fast; the full-size
// configuration is exercised end to end in export.test.ts.
const SMALL: BackboneConfig = {
  layers: 3,
  channels: 48,
  heads: 4,
  mlpRatio: 2,
  patch: 14,
  registers: 2,
  seed: [0, 7],
};

function noisyImage(width: number, height: number, phase: number): RgbImage {
  const data = new Float32Array(width * height * 3);
  for (let i = 0; i < data.length; i++) {
    data[i] = 0.5 + 0.5 * Math.sin(0.37 * i + phase);
  }
  return { width, height, data };
}

function constantImage(width: number, height: number, value: number): RgbImage {
  return { width, height, data: new Float32Array(width * height * 3).fill(value) };
}

beforeAll(async () => {
  await initBackend('wasm');
});

describe('seeded transformer backbone', () => {
  it('produces one finite stack layer per block over the patch grid', () => {
    const net = new Backbone(SMALL);
    const stack = net.forward(noisyImage(42, 28, 0)); // 3x2 patch grid
    expect(stack.layers).toBe(3);
    expect(stack.rows).toBe(2);
    expect(stack.cols).toBe(3);
    expect(stack.channels).toBe(48);
    expect(stack.data.length).toBe(3 * 2 * 3 * 48);
    for (const v of stack.data) {
      expect(Number.isFinite(v)).toBe(true);
    }
  });

  it('is bit-identical across repeated forwards', () => {
    const net = new Backbone(SMALL);
    const a = net.forward(noisyImage(28, 28, 1));
    const b = net.forward(noisyImage(28, 28, 1));
    expect(a.data).toEqual(b.data);
  });

  it('generates weights once and reuses them', () => {
    const net = new Backbone(SMALL);
    expect(net.ensureWeights()).toBe(net.ensureWeights());
  });

  it('changes outputs when the seed changes', () => {
    const a = new Backbone(SMALL).forward(noisyImage(28, 28, 1));
    const b = new Backbone({ ...SMALL, seed: [0, 8] }).forward(noisyImage(28, 28, 1));
    let maxDiff = 0;
    for (let i = 0; i < a.data.length; i++) {
      maxDiff = Math.max(maxDiff, Math.abs(a.data[i] - b.data[i]));
    }
    expect(maxDiff).toBeGreaterThan(1e-3);
  });

  it('keeps the patch grid size regardless of special-token count', () => {
    const img = noisyImage(42, 28, 2);
    const none = new Backbone({ ...SMALL, registers: 0 }).forward(img);
    const many = new Backbone({ ...SMALL, registers: 5 }).forward(img);
    expect(none.data.length).toBe(3 * 2 * 3 * 48);
    expect(many.data.length).toBe(3 * 2 * 3 * 48);
    // attention still sees the extra tokens, so values must differ
    let maxDiff = 0;
    for (let i = 0; i < none.data.length; i++) {
      maxDiff = Math.max(maxDiff, Math.abs(none.data[i] - many.data[i]));
    }
    expect(maxDiff).toBeGreaterThan(1e-4);
  });

  it('distinguishes grid positions on a constant image', () => {
    const stack = new Backbone(SMALL).forward(constantImage(42, 28, 0.5));
    // without the position signal every patch token would be identical
    const first = stack.data.subarray(0, 48);
    const second = stack.data.subarray(48, 96);
    let maxDiff = 0;
    for (let i = 0; i < 48; i++) {
      maxDiff = Math.max(maxDiff, Math.abs(first[i] - second[i]));
    }
    expect(maxDiff).toBeGreaterThan(1e-4);
  });

  it('rejects images that do not tile into whole patches', () => {
    const net = new Backbone(SMALL);
    expect(() => net.forward(noisyImage(30, 28, 0))).toThrow(/multiples of 14/);
  });

  it('rejects channel counts the head layout cannot split', () => {
    expect(() => new Backbone({ ...SMALL, channels: 50 })).toThrow(/heads/);
  });

  it('ships the full-size configuration expected by the pose toolkit', () => {
    expect(VIT_L.layers).toBe(24);
    expect(VIT_L.channels).toBe(1024);
    expect(VIT_L.patch).toBe(14);
  });
});
