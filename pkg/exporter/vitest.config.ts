import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['test/**/*.test.ts'],
    // one CPU in the usual environment, and the heavy suite shares one
    // in-process weight cache per file anyway
    fileParallelism: false,
    testTimeout: 300_000,
    hookTimeout: 300_000,
  },
});
