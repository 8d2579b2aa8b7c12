# Point-guided cascade simulator
# Box refinement cascade, scoring and COCO-style evaluation over synthetic scenes
