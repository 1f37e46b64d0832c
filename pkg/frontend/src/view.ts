// DOM rendering. Crops are drawn 1:1 (no scaling or smoothing) unless a
// display-scale query flag is set; side labels stay neutral ("A"/"B") and
// nothing in the DOM identifies the methods behind the crops.

import { ServiceClient, TaskPayload } from './api.js'
import { Side } from './session.js'

export interface ViewElements {
  original: HTMLImageElement
  candidate: HTMLImageElement
  sideLabel: HTMLElement
  progress: HTMLElement
  status: HTMLElement
}

export function grabElements(doc: Document): ViewElements {
  const get = (id: string) => {
    const el = doc.getElementById(id)
    if (!el) throw new Error(`missing element #${id}`)
    return el
  }
  return {
    original: get('original') as HTMLImageElement,
    candidate: get('candidate') as HTMLImageElement,
    sideLabel: get('side-label'),
    progress: get('progress'),
    status: get('status'),
  }
}

export function displayScaleFromQuery(search: string): number {
  const m = /[?&]scale=([0-9.]+)/.exec(search)
  const v = m ? parseFloat(m[1]) : 1
  return Number.isFinite(v) && v > 0 ? v : 1
}

export class PairView {
  // crops render at their true pixel size by default; when a display
  // scale is set, the matching pooling-width rescale happens server-side
  // for any metric comparisons, not here
  constructor(
    private els: ViewElements,
    private client: ServiceClient,
    private displayScale = 1,
  ) {
    for (const img of [this.els.original, this.els.candidate]) {
      img.style.imageRendering = 'pixelated'
    }
  }

  showTask(task: TaskPayload, visible: Side): void {
    this.els.original.src = this.client.cropUrl(task.original)
    this.showSide(task, visible)
  }

  showSide(task: TaskPayload, visible: Side): void {
    const crop = visible === 1 ? task.side1 : task.side2
    this.els.candidate.src = this.client.cropUrl(crop)
    this.els.sideLabel.textContent = visible === 1 ? 'A' : 'B'
  }

  applyNaturalSize(img: HTMLImageElement): void {
    if (img.naturalWidth > 0) {
      img.style.width = `${img.naturalWidth * this.displayScale}px`
      img.style.height = `${img.naturalHeight * this.displayScale}px`
    }
  }

  setProgress(done: number): void {
    this.els.progress.textContent = `${done} rated`
  }

  setStatus(text: string): void {
    this.els.status.textContent = text
  }
}
