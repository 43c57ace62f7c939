/**
 * End-to-end checks on the full-size network: real files in, .pdsk files
 * out, byte-stable across runs and processes, readable by the Python pose
 * toolkit. Everything heavy lives in this one file so the ~300M generated
 * weights are built a minimal number of times.
 */

import { execFileSync } from 'node:child_process';
import * as fs from 'node:fs';
import * as os from 'node:os';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';
import { PNG } from 'pngjs';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { decodePdsk } from '../src/pdsk.js';
import { initBackend, runExport, validateJob } from '../src/export.js';
import { SplitMix64 } from '../src/prng.js';

const ROOT = path.resolve(path.dirname(fileURLToPath(import.meta.url)), '..');

let tmp: string;
let photo: string;
let dirA: string;
let dirB: string;
let dir420: string;

/** Deterministic non-square test shot: smooth colour field plus seeded noise. */
function writeTestPhoto(file: string): void {
  const width = 200;
  const height = 160;
  const rng = new SplitMix64([0, 2026]);
  const png = new PNG({ width, height });
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 4;
      const noise = () => 40 * (rng.nextFloat() - 0.5);
      png.data[i] = Math.min(255, Math.max(0, 128 + 90 * Math.sin(x / 17) + noise()));
      png.data[i + 1] = Math.min(255, Math.max(0, 128 + 90 * Math.cos(y / 23) + noise()));
      png.data[i + 2] = Math.min(255, Math.max(0, (x + y) % 256));
      png.data[i + 3] = 255;
    }
  }
  fs.writeFileSync(file, PNG.sync.write(png));
}

beforeAll(async () => {
  tmp = fs.mkdtempSync(path.join(os.tmpdir(), 'export-test-'));
  photo = path.join(tmp, 'desk_shot.png');
  writeTestPhoto(photo);
  dirA = path.join(tmp, 'outA');
  dirB = path.join(tmp, 'outB');
  dir420 = path.join(tmp, 'out420');
  await initBackend('wasm');
  await runExport({ images: [photo], outDir: dirA, size: 140, device: 'wasm' });
  await runExport({ images: [photo], outDir: dirB, size: 140, device: 'wasm' });
  await runExport({ images: [photo], outDir: dir420, size: 420, device: 'wasm' });
}, 600_000);

afterAll(() => {
  fs.rmSync(tmp, { recursive: true, force: true });
});

describe('feature export', () => {
  it('writes stacks with the advertised geometry', () => {
    const stack = decodePdsk(fs.readFileSync(path.join(dirA, 'desk_shot.pdsk')));
    expect(stack.layers).toBe(24);
    expect(stack.rows).toBe(10); // 140 / 14
    expect(stack.cols).toBe(10);
    expect(stack.channels).toBe(1024);
    for (const v of stack.data) {
      if (!Number.isFinite(v)) {
        throw new Error('non-finite descriptor value');
      }
    }
  });

  it('is byte-stable across repeated exports', () => {
    const a = fs.readFileSync(path.join(dirA, 'desk_shot.pdsk'));
    const b = fs.readFileSync(path.join(dirB, 'desk_shot.pdsk'));
    expect(a.equals(b)).toBe(true);
  });

  it('scales the grid with the resize target', () => {
    const stack = decodePdsk(fs.readFileSync(path.join(dir420, 'desk_shot.pdsk')));
    expect(stack.rows).toBe(30); // 420 / 14
    expect(stack.cols).toBe(30);
    expect(stack.layers).toBe(24);
    let ok = true;
    for (const v of stack.data) {
      ok = ok && Number.isFinite(v);
    }
    expect(ok).toBe(true);
  });

  it('rejects empty jobs, bad sizes, and output name clashes', () => {
    const good = { images: [photo], outDir: dirA, size: 140, device: 'wasm' as const };
    expect(() => validateJob({ ...good, images: [] })).toThrow(/no input/);
    expect(() => validateJob({ ...good, size: 141 })).toThrow(/multiple of 14/);
    expect(() => validateJob({ ...good, size: 0 })).toThrow(/multiple of 14/);
    expect(() =>
      validateJob({ ...good, images: [photo, path.join(tmp, 'other', 'desk_shot.png')] }),
    ).toThrow(/clash/);
  });

  it('drives the same bytes through the command line in a fresh process', () => {
    const cliDir = path.join(tmp, 'outCli');
    const stdout = execFileSync(
      process.execPath,
      [
        path.join(ROOT, 'dist', 'cli.js'),
        '--images',
        path.join(tmp, '*.png'),
        '--out',
        cliDir,
        '--size',
        '140',
      ],
      { cwd: ROOT, encoding: 'utf8' },
    );
    expect(stdout).toContain('grid 10x10');
    expect(stdout).toContain('1 image(s)');
    const cli = fs.readFileSync(path.join(cliDir, 'desk_shot.pdsk'));
    const lib = fs.readFileSync(path.join(dirA, 'desk_shot.pdsk'));
    expect(cli.equals(lib)).toBe(true);
  }, 600_000);

  it('fails fast from the command line on a bad size', () => {
    let status = 0;
    try {
      execFileSync(
        process.execPath,
        [path.join(ROOT, 'dist', 'cli.js'), '--images', photo, '--out', tmp, '--size', '141'],
        { cwd: ROOT, encoding: 'utf8', stdio: 'pipe' },
      );
    } catch (err) {
      status = (err as { status: number }).status;
    }
    expect(status).toBe(2);
  });

  it('fails fast from the command line when nothing matches', () => {
    let status = 0;
    try {
      execFileSync(
        process.execPath,
        [path.join(ROOT, 'dist', 'cli.js'), '--images', path.join(tmp, 'nope-*.png'), '--out', tmp],
        { cwd: ROOT, encoding: 'utf8', stdio: 'pipe' },
      );
    } catch (err) {
      status = (err as { status: number }).status;
    }
    expect(status).toBe(2);
  });

  it('feeds the Python pose toolkit end to end', () => {
    const stdout = execFileSync(
      'python3',
      [
        path.join(ROOT, 'scripts', 'cross_check.py'),
        path.join(dirA, 'desk_shot.pdsk'),
        path.join(dir420, 'desk_shot.pdsk'),
      ],
      { cwd: ROOT, encoding: 'utf8' },
    );
    expect(stdout).toContain('cross-check ok');
  }, 600_000);
});
