import { ServiceClient } from './api.js'
import { bindKeys } from './keyboard.js'
import { Session } from './session.js'
import { PairView, displayScaleFromQuery, grabElements } from './view.js'

function raterIdFrom(storage: Storage): string {
  let id = storage.getItem('rater-id')
  if (!id) {
    id = `rater-${Math.random().toString(36).slice(2, 10)}`
    storage.setItem('rater-id', id)
  }
  return id
}

function start(): void {
  const client = new ServiceClient('')
  const els = grabElements(document)
  const view = new PairView(els, client, displayScaleFromQuery(location.search))
  const session = new Session(client, raterIdFrom(localStorage), {
    onTask: (task) => {
      view.showTask(task, session.visible)
      view.setStatus('space: flip, 1/2: choose the closer match')
    },
    onFlip: (side) => {
      if (session.task) view.showSide(session.task, side)
    },
    onSubmitted: () => view.setProgress(session.completed),
    onError: (msg) => view.setStatus(msg),
  })

  for (const img of [els.original, els.candidate]) {
    img.addEventListener('load', () => view.applyNaturalSize(img))
    img.addEventListener('error', () => {
      view.setStatus('image failed to load, retrying')
      setTimeout(() => {
        const src = img.src
        img.src = ''
        img.src = src
      }, 1000)
    })
  }

  bindKeys(window, {
    flip: () => session.flip(),
    choose1: () => void session.choose(1),
    choose2: () => void session.choose(2),
  })
  void session.start()
}

start()
