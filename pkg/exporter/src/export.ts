/**
 * Batch export: images in, one PDSK descriptor stack per image out.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import * as tf from '@tensorflow/tfjs';
import { setThreadsCount } from '@tensorflow/tfjs-backend-wasm';
import { decodeImage, resizeBilinear } from './image.js';
import { encodePdsk } from './pdsk.js';
import { sharedBackbone } from './backbone.js';

export type Device = 'wasm' | 'js';

export interface ExportJob {
  images: string[];
  outDir: string;
  /** resize target in pixels; must be a multiple of the 14 px patch size */
  size: number;
  device: Device;
}

export interface ExportedFile {
  source: string;
  out: string;
  rows: number;
  cols: number;
  layers: number;
  channels: number;
}

/**
 * Select the tensor backend once per process. The wasm backend is pinned to
 * one thread so reduction order — and therefore the output bytes — never
 * depends on the machine's core count.
 */
export async function initBackend(device: Device = 'wasm'): Promise<string> {
  if (tf.getBackend() === (device === 'wasm' ? 'wasm' : 'cpu')) {
    return tf.getBackend();
  }
  if (device === 'wasm') {
    setThreadsCount(1);
    await tf.setBackend('wasm');
  } else {
    await tf.setBackend('cpu');
  }
  await tf.ready();
  return tf.getBackend();
}

export function validateJob(job: ExportJob): void {
  if (job.images.length === 0) {
    throw new Error('no input images');
  }
  if (job.size <= 0 || job.size % 14 !== 0) {
    throw new Error(`size must be a positive multiple of 14, got ${job.size}`);
  }
  const seen = new Map<string, string>();
  for (const image of job.images) {
    const stem = path.parse(image).name;
    const clash = seen.get(stem);
    if (clash !== undefined) {
      throw new Error(
        `output name clash: ${clash} and ${image} both map to ${stem}.pdsk`,
      );
    }
    seen.set(stem, image);
  }
}

export async function runExport(job: ExportJob): Promise<ExportedFile[]> {
  validateJob(job);
  await initBackend(job.device);
  fs.mkdirSync(job.outDir, { recursive: true });
  const backbone = sharedBackbone();
  const results: ExportedFile[] = [];
  for (const source of job.images) {
    const image = resizeBilinear(decodeImage(source), job.size, job.size);
    const stack = backbone.forward(image);
    const out = path.join(job.outDir, `${path.parse(source).name}.pdsk`);
    fs.writeFileSync(out, encodePdsk(stack));
    results.push({
      source,
      out,
      rows: stack.rows,
      cols: stack.cols,
      layers: stack.layers,
      channels: stack.channels,
    });
  }
  return results;
}
