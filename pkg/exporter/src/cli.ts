#!/usr/bin/env node
/**
 * export-features: write one PDSK descriptor stack per input image.
 *
 * Usage: export-features --images "photos/*.png" --out stacks/ --size 420
 *
 * Exit codes: 0 success, 1 export failure, 2 usage error (bad flags, no
 * matching files, output name clashes).
 */

import fg from 'fast-glob';
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';
import { Device, runExport, validateJob } from './export.js';

async function main(): Promise<void> {
  const argv = await yargs(hideBin(process.argv))
    .option('images', {
      type: 'string',
      array: true,
      demandOption: true,
      describe: 'Image paths or glob patterns (PNG or JPEG)',
    })
    .option('out', {
      type: 'string',
      demandOption: true,
      describe: 'Directory for the <stem>.pdsk outputs',
    })
    .option('size', {
      type: 'number',
      default: 420,
      describe: 'Square resize target in pixels (multiple of 14)',
    })
    .option('device', {
      type: 'string',
      choices: ['wasm', 'js'] as const,
      default: 'wasm' as Device,
      describe: 'Tensor backend hint',
    })
    .strict()
    .parse();

  const images = await fg(argv.images, { onlyFiles: true });
  images.sort();
  if (images.length === 0) {
    console.error(`error: no files match ${argv.images.join(' ')}`);
    process.exit(2);
  }
  const job = {
    images,
    outDir: argv.out,
    size: argv.size,
    device: argv.device as Device,
  };
  try {
    validateJob(job);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    process.exit(2);
  }
  const started = Date.now();
  const results = await runExport(job);
  for (const r of results) {
    console.log(
      `wrote ${r.out} (L=${r.layers}, grid ${r.rows}x${r.cols}, c=${r.channels})`,
    );
  }
  console.log(
    `${results.length} image(s) in ${((Date.now() - started) / 1000).toFixed(1)} s`,
  );
}

main().catch((err) => {
  console.error(`error: ${(err as Error).message}`);
  process.exit(1);
});
