/**
 * SplitMix64 on 32-bit limbs.
 *
 * Weight generation draws a few hundred million samples, so the generator
 * avoids BigInt and keeps every 64-bit value as an (hi, lo) pair of uint32s
 * held in JS doubles. The limb arithmetic is validated against a BigInt
 * reference implementation in the test suite.
 */

const GOLDEN_HI = 0x9e3779b9;
const GOLDEN_LO = 0x7f4a7c15;
const M1_HI = 0xbf58476d;
const M1_LO = 0x1ce4e5b9;
const M2_HI = 0x94d049bb;
const M2_LO = 0x133111eb;

export type U64 = [hi: number, lo: number];

function mul64(aHi: number, aLo: number, bHi: number, bLo: number): U64 {
  // aLo*bLo in 16-bit pieces: p00 + (p01+p10)*2^16 + p11*2^32
  const a0 = aLo & 0xffff;
  const a1 = aLo >>> 16;
  const b0 = bLo & 0xffff;
  const b1 = bLo >>> 16;
  const p00 = a0 * b0;
  const mid = a0 * b1 + a1 * b0; // exact: < 2^33
  const p11 = a1 * b1;
  const lo = p00 + (mid & 0xffff) * 0x10000; // < 2^33
  const carry = lo >= 0x100000000 ? 1 : 0;
  const hi =
    ((Math.imul(aLo, bHi) >>> 0) +
      (Math.imul(aHi, bLo) >>> 0) +
      p11 +
      Math.floor(mid / 0x10000) +
      carry) >>>
    0;
  return [hi, lo >>> 0];
}

function add64(aHi: number, aLo: number, bHi: number, bLo: number): U64 {
  const lo = aLo + bLo;
  const hi = (aHi + bHi + (lo >= 0x100000000 ? 1 : 0)) >>> 0;
  return [hi, lo >>> 0];
}

/** z ^ (z >>> k) for 0 < k < 32. */
function xorShiftRight(hi: number, lo: number, k: number): U64 {
  const sLo = ((lo >>> k) | (hi << (32 - k))) >>> 0;
  const sHi = hi >>> k;
  return [(hi ^ sHi) >>> 0, (lo ^ sLo) >>> 0];
}

export class SplitMix64 {
  private hi: number;
  private lo: number;

  constructor(seed: U64) {
    this.hi = seed[0] >>> 0;
    this.lo = seed[1] >>> 0;
  }

  nextU64(): U64 {
    [this.hi, this.lo] = add64(this.hi, this.lo, GOLDEN_HI, GOLDEN_LO);
    let [hi, lo] = xorShiftRight(this.hi, this.lo, 30);
    [hi, lo] = mul64(hi, lo, M1_HI, M1_LO);
    [hi, lo] = xorShiftRight(hi, lo, 27);
    [hi, lo] = mul64(hi, lo, M2_HI, M2_LO);
    return xorShiftRight(hi, lo, 31);
  }

  /** Uniform in [0, 1) from the top 53 bits. */
  nextFloat(): number {
    const [hi, lo] = this.nextU64();
    return (hi * 0x200000 + (lo >>> 11)) * 2 ** -53;
  }

  /** Fill with uniform samples in [-bound, bound). */
  fillUniform(out: Float32Array, bound: number): Float32Array {
    for (let i = 0; i < out.length; i++) {
      out[i] = (this.nextFloat() * 2 - 1) * bound;
    }
    return out;
  }
}

/**
 * Independent child stream for tensor `ordinal` of a master seed: offset the
 * master, then let one SplitMix64 output act as the child's seed.
 */
export function childStream(master: U64, ordinal: number): SplitMix64 {
  const offset = add64(master[0], master[1], 0, ordinal >>> 0);
  return new SplitMix64(new SplitMix64(offset).nextU64());
}

export function toHex(v: U64): string {
  return (
    v[0].toString(16).padStart(8, '0') + v[1].toString(16).padStart(8, '0')
  );
}
